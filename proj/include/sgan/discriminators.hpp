#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "sgan/core/nn.hpp"
#include "sgan/core/ops.hpp"

namespace sgan {

struct CriticConfig {
  int in_channels = 3;
  int base_channels = 64;
  int num_downsample = 3;  // 3 gives the 70x70 receptive field

  static CriticConfig toy() { return {3, 8, 2}; }

  /// Score-map side for a given input side, or <1 when undersized.
  int output_size(int side) const {
    for (int i = 0; i < num_downsample; ++i) side = side / 2;  // k4 s2 p1
    return side - 2;                                           // two k4 s1 p1
  }

  int receptive_field() const {
    int r = 4;   // final k4 s1
    r += 3;      // penultimate k4 s1
    for (int i = 0; i < num_downsample; ++i) r = 2 * r + 2;
    return r;
  }
};

/// PatchGAN critic producing unbounded per-patch scores [N,1,h',w'].
template <class T>
class PatchCritic : public nn::Module<T> {
 public:
  PatchCritic() = default;
  PatchCritic(CriticConfig cfg, nn::Rng& rng) : cfg_(cfg) {
    if (cfg.num_downsample < 1) throw std::invalid_argument("critic needs >= 1 downsample");
    int ch = cfg.base_channels;
    layers_.emplace_back(cfg.in_channels, ch, 4, 2, 1, rng);
    for (int i = 1; i < cfg.num_downsample; ++i) {
      const int next = std::min(ch * 2, cfg.base_channels * 8);
      layers_.emplace_back(ch, next, 4, 2, 1, rng);
      ch = next;
    }
    const int next = std::min(ch * 2, cfg.base_channels * 8);
    layers_.emplace_back(ch, next, 4, 1, 1, rng);
    layers_.emplace_back(next, 1, 4, 1, 1, rng);
  }

  const CriticConfig& config() const { return cfg_; }

  Var<T> operator()(const Var<T>& image) const {
    const Shape& s = image.shape();
    if (s.size() != 4 || s[1] != cfg_.in_channels)
      throw ShapeError("critic expects [N," + std::to_string(cfg_.in_channels) + ",H,W], got " +
                       shape_str(s));
    if (cfg_.output_size(s[2]) < 1 || cfg_.output_size(s[3]) < 1)
      throw ShapeError("critic input " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                       " is undersized for " + std::to_string(cfg_.num_downsample) +
                       " downsampling layers");
    auto h = ops::leaky_relu(layers_[0](image), T(0.2));
    for (std::size_t i = 1; i + 1 < layers_.size(); ++i)
      h = ops::leaky_relu(ops::instance_norm(layers_[i](h)), T(0.2));
    return layers_.back()(h);
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) const override {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      layers_[i].collect(prefix + "layer" + std::to_string(i) + ".", out);
  }

 private:
  CriticConfig cfg_;
  std::vector<nn::Conv2d<T>> layers_;
};

}  // namespace sgan
