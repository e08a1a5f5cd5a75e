#pragma once

// Detector contract used by the detection loss, plus a small anchor-free grid
// detector that stands in for a production detector at 64px.

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "sgan/boxes.hpp"
#include "sgan/core/nn.hpp"
#include "sgan/core/ops.hpp"

namespace sgan {

struct DetectorConfig {
  int in_channels = 3;
  int num_classes = 2;
  int image_size = 64;
  int width = 16;
  int num_downsample = 3;
  double conf_threshold = 0.25;
  double nms_iou = 0.45;

  int grid() const { return image_size >> num_downsample; }
};

/// Dense per-cell outputs. `boxes` holds decoded (cx, cy, w, h) in
/// normalised image coordinates, channel-major.
template <class T>
struct DetectorMaps {
  Var<T> objectness;    // [N,1,G,G] logits
  Var<T> class_logits;  // [N,K,G,G]
  Var<T> boxes;         // [N,4,G,G]

  int batch() const { return objectness.dim(0); }
  int grid_h() const { return objectness.dim(2); }
  int grid_w() const { return objectness.dim(3); }
  int num_classes() const { return class_logits.dim(1); }
};

template <class T>
class Detector {
 public:
  virtual ~Detector() = default;
  virtual DetectorMaps<T> forward(const Var<T>& images) const = 0;
  virtual const DetectorConfig& config() const = 0;
};

/// Thresholded, NMS-filtered boxes from dense maps, one BoxSet per image.
template <class T>
std::vector<BoxSet> decode(const DetectorMaps<T>& maps, const DetectorConfig& cfg) {
  const int N = maps.batch(), G = maps.grid_h(), Gw = maps.grid_w(), K = maps.num_classes();
  const int cells = G * Gw;
  std::vector<BoxSet> out(N);
  const auto& obj = maps.objectness.value();
  const auto& cls = maps.class_logits.value();
  const auto& box = maps.boxes.value();
  for (int n = 0; n < N; ++n) {
    BoxSet cand;
    for (int c = 0; c < cells; ++c) {
      const double po = ops::sigmoid_scalar(static_cast<double>(obj[static_cast<std::size_t>(n) * cells + c]));
      int best = 0;
      double best_p = -1;
      for (int k = 0; k < K; ++k) {
        const double pk = ops::sigmoid_scalar(
            static_cast<double>(cls[(static_cast<std::size_t>(n) * K + k) * cells + c]));
        if (pk > best_p) {
          best_p = pk;
          best = k;
        }
      }
      const double conf = po * best_p;
      if (conf < cfg.conf_threshold) continue;
      auto at = [&](int ch) {
        return static_cast<double>(box[(static_cast<std::size_t>(n) * 4 + ch) * cells + c]);
      };
      cand.boxes.push_back({best, at(0), at(1), at(2), at(3), conf});
    }
    out[n] = nms(cand, cfg.nms_iou);
  }
  return out;
}

template <class T>
class ToyDetector : public Detector<T>, public nn::Module<T> {
 public:
  ToyDetector() = default;
  ToyDetector(DetectorConfig cfg, nn::Rng& rng) : cfg_(cfg) {
    if (cfg.grid() < 1 || (cfg.image_size % (1 << cfg.num_downsample)) != 0)
      throw std::invalid_argument("detector image size must be divisible by 2^num_downsample");
    int ch = cfg.in_channels;
    for (int i = 0; i < cfg.num_downsample; ++i) {
      const int next = cfg.width << std::min(i, 2);
      backbone_.emplace_back(ch, next, 3, 2, 1, rng);
      ch = next;
    }
    backbone_.emplace_back(ch, ch, 3, 1, 1, rng);
    head_ = nn::Conv2d<T>(ch, 5 + cfg.num_classes, 1, 1, 0, rng);
    const int G = cfg.grid();
    offset_ = Tensor<T>(Shape{1, 4, G, G});
    scale_ = Tensor<T>(Shape{1, 4, G, G}, T(1));
    for (int gy = 0; gy < G; ++gy)
      for (int gx = 0; gx < G; ++gx) {
        offset_.at(0, 0, gy, gx) = T(gx);
        offset_.at(0, 1, gy, gx) = T(gy);
        scale_.at(0, 0, gy, gx) = T(1) / T(G);
        scale_.at(0, 1, gy, gx) = T(1) / T(G);
      }
  }

  const DetectorConfig& config() const override { return cfg_; }
  DetectorConfig& mutable_config() { return cfg_; }

  DetectorMaps<T> forward(const Var<T>& images) const override {
    const Shape& s = images.shape();
    if (s.size() != 4 || s[1] != cfg_.in_channels || s[2] != cfg_.image_size ||
        s[3] != cfg_.image_size)
      throw ShapeError("detector expects [N," + std::to_string(cfg_.in_channels) + "," +
                       std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) +
                       "], got " + shape_str(s));
    Var<T> h = images;
    for (const auto& conv : backbone_) h = ops::leaky_relu(conv(h), T(0.1));
    auto raw = head_(h);
    const int N = s[0];
    DetectorMaps<T> maps;
    maps.objectness = ops::slice_channels(raw, 0, 1);
    maps.class_logits = ops::slice_channels(raw, 5, 5 + cfg_.num_classes);
    auto unit = ops::sigmoid(ops::slice_channels(raw, 1, 5));
    maps.boxes = ops::mul(ops::add(unit, ops::constant(tile(offset_, N))),
                          ops::constant(tile(scale_, N)));
    return maps;
  }

  std::vector<BoxSet> detect(const Tensor<T>& images) const {
    NoGradGuard guard;
    return decode(forward(Var<T>(images)), cfg_);
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) const override {
    for (std::size_t i = 0; i < backbone_.size(); ++i)
      backbone_[i].collect(prefix + "backbone" + std::to_string(i) + ".", out);
    head_.collect(prefix + "head.", out);
  }

 private:
  static Tensor<T> tile(const Tensor<T>& t, int n) {
    Shape s = t.shape();
    s[0] = n;
    Tensor<T> out(s);
    for (int i = 0; i < n; ++i) std::copy(t.vec().begin(), t.vec().end(), out.data() + i * t.size());
    return out;
  }

  DetectorConfig cfg_;
  std::vector<nn::Conv2d<T>> backbone_;
  nn::Conv2d<T> head_;
  Tensor<T> offset_, scale_;
};

/// Read-only view of a trained detector: parameters never receive gradients,
/// but gradients still flow through its input.
template <class T>
class FrozenDetector : public Detector<T> {
 public:
  explicit FrozenDetector(std::shared_ptr<const ToyDetector<T>> det) : det_(std::move(det)) {
    det_->freeze();
  }
  DetectorMaps<T> forward(const Var<T>& images) const override { return det_->forward(images); }
  const DetectorConfig& config() const override { return det_->config(); }
  const ToyDetector<T>& inner() const { return *det_; }

 private:
  std::shared_ptr<const ToyDetector<T>> det_;
};

}  // namespace sgan
