#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sgan/core/nn.hpp"

namespace sgan::optim {

struct AdamOptions {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction over a fixed parameter list.
template <class T>
class Adam {
 public:
  Adam() = default;
  Adam(nn::ParamList<T> params, AdamOptions opt) : params_(std::move(params)), opt_(opt) {
    for (const auto& p : params_) {
      m_.push_back(Tensor<T>::zeros(p.var.shape()));
      v_.push_back(Tensor<T>::zeros(p.var.shape()));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(opt_.beta1), b2 = static_cast<T>(opt_.beta2);
    const T lr = static_cast<T>(opt_.lr), eps = static_cast<T>(opt_.eps);
    const T c1 = static_cast<T>(1.0 / bc1), c2 = static_cast<T>(1.0 / bc2);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& var = params_[k].var;
      if (!var.has_grad()) continue;
      const auto& g = var.grad();
      auto& w = var.mutable_value();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
        w[i] -= lr * (m[i] * c1) / (std::sqrt(v[i] * c2) + eps);
      }
    }
  }

  std::int64_t steps() const { return t_; }
  const AdamOptions& options() const { return opt_; }
  const nn::ParamList<T>& params() const { return params_; }

  /// Moment buffers as named tensors, for checkpointing.
  std::vector<std::pair<std::string, const Tensor<T>*>> state_items() const {
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    for (std::size_t k = 0; k < params_.size(); ++k) {
      out.emplace_back("m." + params_[k].name, &m_[k]);
      out.emplace_back("v." + params_[k].name, &v_[k]);
    }
    return out;
  }

  void restore(std::map<std::string, Tensor<T>> state, std::int64_t steps) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      for (auto* which : {&m_, &v_}) {
        const std::string key = (which == &m_ ? "m." : "v.") + params_[k].name;
        auto it = state.find(key);
        if (it == state.end() || it->second.shape() != params_[k].var.shape())
          throw nn::SerializationError("optimizer state missing or mismatched: " + key);
        (*which)[k] = std::move(it->second);
      }
    }
    t_ = steps;
  }

 private:
  nn::ParamList<T> params_;
  AdamOptions opt_;
  std::vector<Tensor<T>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace sgan::optim
