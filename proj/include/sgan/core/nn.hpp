#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "sgan/core/autograd.hpp"
#include "sgan/core/ops.hpp"

namespace sgan::nn {

using Rng = std::mt19937_64;

template <class T>
struct NamedParam {
  std::string name;
  Var<T> var;
};

template <class T>
using ParamList = std::vector<NamedParam<T>>;

template <class T>
Tensor<T> normal_tensor(const Shape& s, T stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  Tensor<T> t(s);
  for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
  return t;
}

/// Base for anything owning trainable parameters.
template <class T>
class Module {
 public:
  virtual ~Module() = default;
  virtual void collect(const std::string& prefix, ParamList<T>& out) const = 0;

  ParamList<T> parameters(const std::string& prefix = "") const {
    ParamList<T> out;
    collect(prefix, out);
    return out;
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.var.size();
    return n;
  }
  void zero_grad() const {
    for (auto p : parameters()) p.var.zero_grad();
  }
  /// Marks every parameter constant; gradients still flow through inputs.
  void freeze() const {
    for (auto p : parameters()) p.var.set_requires_grad(false);
  }
};

template <class T>
class Conv2d : public Module<T> {
 public:
  Conv2d() = default;
  Conv2d(int in, int out, int kernel, int stride, int pad, Rng& rng, bool bias = true)
      : stride_(stride), pad_(pad) {
    weight = Var<T>(normal_tensor<T>({out, in, kernel, kernel}, T(0.02), rng), true);
    if (bias) this->bias = Var<T>(Tensor<T>::zeros({out}), true);
  }
  Var<T> operator()(const Var<T>& x) const { return ops::conv2d(x, weight, bias, stride_, pad_); }
  void collect(const std::string& prefix, ParamList<T>& out) const override {
    out.push_back({prefix + "weight", weight});
    if (bias.defined()) out.push_back({prefix + "bias", bias});
  }
  int in_channels() const { return weight.dim(1); }
  int out_channels() const { return weight.dim(0); }

  Var<T> weight, bias;

 private:
  int stride_ = 1, pad_ = 0;
};

template <class T>
class ConvTranspose2d : public Module<T> {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(int in, int out, int kernel, int stride, int pad, int out_pad, Rng& rng)
      : stride_(stride), pad_(pad), out_pad_(out_pad) {
    weight = Var<T>(normal_tensor<T>({in, out, kernel, kernel}, T(0.02), rng), true);
    bias = Var<T>(Tensor<T>::zeros({out}), true);
  }
  Var<T> operator()(const Var<T>& x) const {
    return ops::conv_transpose2d(x, weight, bias, stride_, pad_, out_pad_);
  }
  void collect(const std::string& prefix, ParamList<T>& out) const override {
    out.push_back({prefix + "weight", weight});
    out.push_back({prefix + "bias", bias});
  }

  Var<T> weight, bias;

 private:
  int stride_ = 2, pad_ = 1, out_pad_ = 1;
};

/// conv3x3-IN-ReLU-conv3x3-IN with identity skip.
template <class T>
class ResidualBlock : public Module<T> {
 public:
  ResidualBlock() = default;
  ResidualBlock(int channels, Rng& rng)
      : conv1(channels, channels, 3, 1, 1, rng), conv2(channels, channels, 3, 1, 1, rng) {}
  Var<T> operator()(const Var<T>& x) const {
    auto h = ops::relu(ops::instance_norm(conv1(x)));
    h = ops::instance_norm(conv2(h));
    return ops::add(x, h);
  }
  /// Zeroes the residual branch so the block is the identity map.
  void make_identity() {
    conv2.weight.mutable_value().fill(T(0));
    conv2.bias.mutable_value().fill(T(0));
  }
  void collect(const std::string& prefix, ParamList<T>& out) const override {
    conv1.collect(prefix + "conv1.", out);
    conv2.collect(prefix + "conv2.", out);
  }

  Conv2d<T> conv1, conv2;
};

// ---- parameter blobs -----------------------------------------------------
//
// Layout: "SGANBLOB" | u32 version | u32 scalar bytes | u32 count |
//         { u32 name_len | name | u32 rank | i32 dims[rank] | raw values }*

class SerializationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
template <class V>
void write_pod(std::ostream& os, const V& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <class V>
V read_pod(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw SerializationError("truncated blob");
  return v;
}
}  // namespace detail

template <class T>
void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, const Tensor<T>*>>& items) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw SerializationError("cannot write " + path);
  os.write("SGANBLOB", 8);
  detail::write_pod<std::uint32_t>(os, 1);
  detail::write_pod<std::uint32_t>(os, sizeof(T));
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(items.size()));
  for (const auto& [name, t] : items) {
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t->rank()));
    for (int d : t->shape()) detail::write_pod<std::int32_t>(os, d);
    os.write(reinterpret_cast<const char*>(t->data()),
             static_cast<std::streamsize>(t->size() * sizeof(T)));
  }
  if (!os) throw SerializationError("write failed: " + path);
}

template <class T>
std::map<std::string, Tensor<T>> load_tensors(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw SerializationError("cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != "SGANBLOB") throw SerializationError("bad magic in " + path);
  if (detail::read_pod<std::uint32_t>(is) != 1) throw SerializationError("unsupported version");
  if (detail::read_pod<std::uint32_t>(is) != sizeof(T))
    throw SerializationError("scalar width mismatch in " + path);
  const auto count = detail::read_pod<std::uint32_t>(is);
  std::map<std::string, Tensor<T>> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::read_pod<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto rank = detail::read_pod<std::uint32_t>(is);
    Shape s(rank);
    for (auto& d : s) d = detail::read_pod<std::int32_t>(is);
    Tensor<T> t(s);
    is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
    if (!is) throw SerializationError("truncated tensor " + name + " in " + path);
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

template <class T>
void save_parameters(const std::string& path, const ParamList<T>& params) {
  std::vector<std::pair<std::string, const Tensor<T>*>> items;
  for (const auto& p : params) items.emplace_back(p.name, &p.var.value());
  save_tensors<T>(path, items);
}

/// Loads values into existing parameters; names and shapes must match exactly.
template <class T>
void load_parameters(const std::string& path, const ParamList<T>& params) {
  auto stored = load_tensors<T>(path);
  if (stored.size() != params.size())
    throw SerializationError(path + ": expected " + std::to_string(params.size()) +
                             " tensors, found " + std::to_string(stored.size()));
  for (auto p : params) {
    auto it = stored.find(p.name);
    if (it == stored.end()) throw SerializationError(path + ": missing " + p.name);
    if (it->second.shape() != p.var.shape())
      throw SerializationError(path + ": shape mismatch for " + p.name);
    p.var.mutable_value() = std::move(it->second);
  }
}

}  // namespace sgan::nn
