#pragma once

// Position attention (multi-scale pooled sigmoid gate), channel attention
// (row-softmax Gram matrix with additive skip) and their fused dual form.

#include <stdexcept>
#include <string>
#include <vector>

#include "sgan/core/fraction.hpp"
#include "sgan/core/nn.hpp"
#include "sgan/core/ops.hpp"

namespace sgan {

class AttentionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::vector<Fraction> default_pam_scales() {
  return {Fraction(1, 1), Fraction(1, 2), Fraction(1, 4), Fraction(1, 16)};
}

namespace detail {
template <class T>
void require_finite(const Var<T>& f, const char* who) {
  if (!f.value().all_finite()) throw AttentionError(std::string(who) + ": non-finite input");
}
}  // namespace detail

/// Multi-scale spatial gate. Each pooled branch is projected to one channel,
/// upsampled back, concatenated, fused by a 1x1 projection and squashed with
/// a sigmoid; the resulting [N,1,H,W] map multiplies every channel.
template <class T>
class PositionAttention : public nn::Module<T> {
 public:
  PositionAttention() = default;
  PositionAttention(int channels, std::vector<Fraction> scales, nn::Rng& rng)
      : scales_(std::move(scales)) {
    if (scales_.empty()) throw AttentionError("PAM needs at least one pooling scale");
    for (std::size_t i = 0; i < scales_.size(); ++i)
      branches_.emplace_back(channels, 1, 1, 1, 0, rng);
    fuse_ = nn::Conv2d<T>(static_cast<int>(scales_.size()), 1, 1, 1, 0, rng);
  }

  const std::vector<Fraction>& scales() const { return scales_; }
  const std::vector<nn::Conv2d<T>>& branches() const { return branches_; }
  std::vector<nn::Conv2d<T>>& branches() { return branches_; }
  nn::Conv2d<T>& fuse() { return fuse_; }
  const nn::Conv2d<T>& fuse() const { return fuse_; }

  /// Pooled grid size for each scale; throws if any branch would be empty.
  std::vector<std::pair<int, int>> pooled_sizes(int H, int W) const {
    std::vector<std::pair<int, int>> out;
    for (const auto& s : scales_) {
      const int ph = s.apply(H), pw = s.apply(W);
      if (ph < 1 || pw < 1)
        throw AttentionError("PAM: feature map " + std::to_string(H) + "x" + std::to_string(W) +
                             " is too small for pooling scale " + s.str());
      out.emplace_back(ph, pw);
    }
    return out;
  }

  /// The gate M in (0,1), shape [N,1,H,W].
  Var<T> attention_map(const Var<T>& f) const {
    detail::require_finite(f, "PAM");
    const int H = f.dim(2), W = f.dim(3);
    const auto sizes = pooled_sizes(H, W);
    std::vector<Var<T>> ups;
    for (std::size_t i = 0; i < scales_.size(); ++i) {
      auto pooled = ops::adaptive_avg_pool2d(f, sizes[i].first, sizes[i].second);
      ups.push_back(ops::upsample_bilinear(branches_[i](pooled), H, W));
    }
    return ops::sigmoid(fuse_(ops::concat_channels(ups)));
  }

  Var<T> operator()(const Var<T>& f) const {
    return ops::mul_broadcast_channels(f, attention_map(f));
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) const override {
    for (std::size_t i = 0; i < branches_.size(); ++i)
      branches_[i].collect(prefix + "branch" + std::to_string(i) + ".", out);
    fuse_.collect(prefix + "fuse.", out);
  }

 private:
  std::vector<Fraction> scales_;
  std::vector<nn::Conv2d<T>> branches_;
  nn::Conv2d<T> fuse_;
};

/// Row-softmax channel affinity X = softmax(A B^T), shape [N,C,C].
template <class T>
Var<T> channel_attention_matrix(const Var<T>& f) {
  detail::require_finite(f, "CAM");
  const int N = f.dim(0), C = f.dim(1), HW = f.dim(2) * f.dim(3);
  auto a = ops::reshape(f, {N, C, HW});
  return ops::softmax_lastdim(ops::bmm(a, a, /*transpose_b=*/true));
}

/// F_c = X * C + A, reshaped back to [N,C,H,W]. No learned scale on the skip.
template <class T>
Var<T> cam_forward(const Var<T>& f) {
  const int N = f.dim(0), C = f.dim(1), HW = f.dim(2) * f.dim(3);
  auto x = channel_attention_matrix(f);
  auto a = ops::reshape(f, {N, C, HW});
  auto attended = ops::bmm(x, a);
  return ops::reshape(ops::add(attended, a), f.shape());
}

/// proj1(PAM(f)) + proj2(CAM(f)); either branch may be disabled.
template <class T>
class DualAttention : public nn::Module<T> {
 public:
  DualAttention() = default;
  DualAttention(int channels, bool use_pam, bool use_cam, std::vector<Fraction> scales,
                nn::Rng& rng)
      : use_pam_(use_pam), use_cam_(use_cam) {
    if (!use_pam && !use_cam) throw AttentionError("dual attention with both branches disabled");
    if (use_pam_) {
      pam_ = PositionAttention<T>(channels, std::move(scales), rng);
      proj_pam_ = nn::Conv2d<T>(channels, channels, 1, 1, 0, rng);
    }
    if (use_cam_) proj_cam_ = nn::Conv2d<T>(channels, channels, 1, 1, 0, rng);
  }

  bool use_pam() const { return use_pam_; }
  bool use_cam() const { return use_cam_; }
  const PositionAttention<T>& pam() const { return pam_; }
  PositionAttention<T>& pam() { return pam_; }
  nn::Conv2d<T>& proj_pam() { return proj_pam_; }
  nn::Conv2d<T>& proj_cam() { return proj_cam_; }

  Var<T> operator()(const Var<T>& f) const {
    if (use_pam_ && use_cam_) return ops::add(proj_pam_(pam_(f)), proj_cam_(cam_forward(f)));
    if (use_pam_) return proj_pam_(pam_(f));
    return proj_cam_(cam_forward(f));
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) const override {
    if (use_pam_) {
      pam_.collect(prefix + "pam.", out);
      proj_pam_.collect(prefix + "proj_pam.", out);
    }
    if (use_cam_) proj_cam_.collect(prefix + "proj_cam.", out);
  }

 private:
  bool use_pam_ = true, use_cam_ = true;
  PositionAttention<T> pam_;
  nn::Conv2d<T> proj_pam_, proj_cam_;
};

}  // namespace sgan
