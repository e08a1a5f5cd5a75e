#pragma once

// Two-scale translation generators. The full-resolution trunk receives the
// coarse generator's deconvolved features after its first two convolutions;
// dual attention then refines the trunk before the residual stack.

#include <bit>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sgan/attention.hpp"
#include "sgan/core/fraction.hpp"
#include "sgan/core/nn.hpp"
#include "sgan/core/ops.hpp"

namespace sgan {

class GeneratorConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct GeneratorConfig {
  int in_channels = 3;
  int out_channels = 3;
  int base_channels = 64;
  int num_residual_blocks_g1 = 6;
  int num_residual_blocks_g2 = 9;
  Fraction downsample_scale{1, 4};
  bool use_multiscale = true;
  bool use_pam = true;
  bool use_cam = true;
  std::vector<Fraction> pam_scales = default_pam_scales();

  /// 64px desk-scale profile: narrow trunk, 3 + 2 residual blocks.
  static GeneratorConfig toy() {
    GeneratorConfig c;
    c.base_channels = 16;
    c.num_residual_blocks_g2 = 3;
    c.num_residual_blocks_g1 = 2;
    return c;
  }

  void validate() const {
    if (in_channels < 1 || out_channels < 1 || base_channels < 1)
      throw GeneratorConfigError("channel counts must be positive");
    if (num_residual_blocks_g1 < 1 || num_residual_blocks_g2 < 1)
      throw GeneratorConfigError("residual block counts must be >= 1");
    if (use_multiscale && (downsample_scale.num != 1 || !std::has_single_bit(
                                                             static_cast<unsigned>(downsample_scale.den))))
      throw GeneratorConfigError("downsample_scale must be 1/2^k, got " + downsample_scale.str());
  }

  /// Input sides must be a multiple of this.
  int required_multiple() const {
    return use_multiscale ? std::lcm(4, 2 * downsample_scale.den) : 4;
  }
};

/// Low-resolution generator: resize, stem, one stride-2 convolution,
/// residual blocks, then enough deconvolutions to land on half resolution.
template <class T>
class CoarseGenerator : public nn::Module<T> {
 public:
  CoarseGenerator() = default;
  CoarseGenerator(const GeneratorConfig& cfg, nn::Rng& rng) : scale_(cfg.downsample_scale) {
    const int nf = cfg.base_channels;
    stem_ = nn::Conv2d<T>(cfg.in_channels, nf, 7, 1, 3, rng);
    down_ = nn::Conv2d<T>(nf, 2 * nf, 3, 2, 1, rng);
    for (int i = 0; i < cfg.num_residual_blocks_g1; ++i) blocks_.emplace_back(2 * nf, rng);
    const int n_up = std::countr_zero(static_cast<unsigned>(scale_.den));
    for (int i = 0; i < n_up; ++i) ups_.emplace_back(2 * nf, 2 * nf, 3, 2, 1, 1, rng);
  }

  Var<T> operator()(const Var<T>& image) const {
    const int h = scale_.apply(image.dim(2)), w = scale_.apply(image.dim(3));
    Var<T> x = (h == image.dim(2) && w == image.dim(3)) ? image
                                                        : ops::adaptive_avg_pool2d(image, h, w);
    x = ops::relu(ops::instance_norm(stem_(x)));
    x = ops::relu(ops::instance_norm(down_(x)));
    for (const auto& b : blocks_) x = b(x);
    for (const auto& u : ups_) x = ops::relu(ops::instance_norm(u(x)));
    return x;
  }

  std::vector<nn::ResidualBlock<T>>& blocks() { return blocks_; }

  void collect(const std::string& prefix, nn::ParamList<T>& out) const override {
    stem_.collect(prefix + "stem.", out);
    down_.collect(prefix + "down.", out);
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].collect(prefix + "block" + std::to_string(i) + ".", out);
    for (std::size_t i = 0; i < ups_.size(); ++i)
      ups_[i].collect(prefix + "up" + std::to_string(i) + ".", out);
  }

 private:
  Fraction scale_;
  nn::Conv2d<T> stem_, down_;
  std::vector<nn::ResidualBlock<T>> blocks_;
  std::vector<nn::ConvTranspose2d<T>> ups_;
};

template <class T>
class Generator : public nn::Module<T> {
 public:
  Generator() = default;
  Generator(GeneratorConfig cfg, nn::Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int nf = cfg_.base_channels;
    // Trunk first so ablation variants built from one seed share trunk weights.
    stem_ = nn::Conv2d<T>(cfg_.in_channels, nf, 7, 1, 3, rng);
    down1_ = nn::Conv2d<T>(nf, 2 * nf, 3, 2, 1, rng);
    down2_ = nn::Conv2d<T>(2 * nf, 4 * nf, 3, 2, 1, rng);
    for (int i = 0; i < cfg_.num_residual_blocks_g2; ++i) blocks_.emplace_back(4 * nf, rng);
    up1_ = nn::ConvTranspose2d<T>(4 * nf, 2 * nf, 3, 2, 1, 1, rng);
    up2_ = nn::ConvTranspose2d<T>(2 * nf, nf, 3, 2, 1, 1, rng);
    out_ = nn::Conv2d<T>(nf, cfg_.out_channels, 7, 1, 3, rng);
    if (cfg_.use_pam || cfg_.use_cam)
      attention_.emplace(4 * nf, cfg_.use_pam, cfg_.use_cam, cfg_.pam_scales, rng);
    if (cfg_.use_multiscale) coarse_.emplace(cfg_, rng);
  }

  const GeneratorConfig& config() const { return cfg_; }
  bool has_coarse() const { return coarse_.has_value(); }
  CoarseGenerator<T>& coarse() { return *coarse_; }
  const CoarseGenerator<T>& coarse() const { return *coarse_; }
  bool has_attention() const { return attention_.has_value(); }
  DualAttention<T>& attention() { return *attention_; }

  void check_input(const Shape& s) const {
    if (s.size() != 4 || s[1] != cfg_.in_channels)
      throw ShapeError("generator expects [N," + std::to_string(cfg_.in_channels) +
                       ",H,W], got " + shape_str(s));
    const int m = cfg_.required_multiple();
    if (s[2] % m != 0 || s[3] % m != 0)
      throw ShapeError("generator input " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                       " must have sides divisible by " + std::to_string(m));
  }

  /// Coarse-generator tap that is added into the trunk.
  Var<T> coarse_features(const Var<T>& image) const {
    if (!coarse_) throw GeneratorConfigError("generator has no multi-scale branch");
    check_input(image.shape());
    return (*coarse_)(image);
  }

  Var<T> operator()(const Var<T>& image) const {
    check_input(image.shape());
    auto h = ops::relu(ops::instance_norm(stem_(image)));
    h = ops::relu(ops::instance_norm(down1_(h)));
    if (coarse_) h = ops::add(h, (*coarse_)(image));
    h = ops::relu(ops::instance_norm(down2_(h)));
    if (attention_) h = ops::add(h, (*attention_)(h));
    for (const auto& b : blocks_) h = b(h);
    h = ops::relu(ops::instance_norm(up1_(h)));
    h = ops::relu(ops::instance_norm(up2_(h)));
    return ops::tanh(out_(h));
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) const override {
    stem_.collect(prefix + "stem.", out);
    down1_.collect(prefix + "down1.", out);
    down2_.collect(prefix + "down2.", out);
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].collect(prefix + "block" + std::to_string(i) + ".", out);
    up1_.collect(prefix + "up1.", out);
    up2_.collect(prefix + "up2.", out);
    out_.collect(prefix + "out.", out);
    if (attention_) attention_->collect(prefix + "attention.", out);
    if (coarse_) coarse_->collect(prefix + "coarse.", out);
  }

 private:
  GeneratorConfig cfg_;
  nn::Conv2d<T> stem_, down1_, down2_, out_;
  std::vector<nn::ResidualBlock<T>> blocks_;
  nn::ConvTranspose2d<T> up1_, up2_;
  std::optional<DualAttention<T>> attention_;
  std::optional<CoarseGenerator<T>> coarse_;
};

/// G: normal -> adverse (multi-scale + attention), F: adverse -> normal
/// (single scale). The backward direction is deliberately the weaker model.
template <class T>
struct GeneratorPair {
  Generator<T> normal_to_adverse;
  Generator<T> adverse_to_normal;

  std::pair<std::size_t, std::size_t> parameter_counts() const {
    return {normal_to_adverse.parameter_count(), adverse_to_normal.parameter_count()};
  }
};

template <class T>
GeneratorPair<T> build_pair(const GeneratorConfig& forward, const GeneratorConfig& backward,
                            nn::Rng& rng) {
  if (backward.use_multiscale)
    throw GeneratorConfigError("the adverse-to-normal generator must be single-scale");
  GeneratorPair<T> pair{Generator<T>(forward, rng), Generator<T>(backward, rng)};
  return pair;
}

/// Default backward config derived from a forward one.
inline GeneratorConfig backward_config(GeneratorConfig forward) {
  forward.use_multiscale = false;
  return forward;
}

}  // namespace sgan
