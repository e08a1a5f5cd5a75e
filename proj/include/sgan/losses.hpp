#pragma once

// Training objective: k1*L_det + k2*L_adv + k3*L_cyc, with
// L_det = a*L_ciou + b*L_cls + c*L_conf evaluated by a frozen detector.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "sgan/boxes.hpp"
#include "sgan/core/ops.hpp"
#include "sgan/detector.hpp"

namespace sgan {

struct LossWeights {
  double k1 = 0.8;  // detection
  double k2 = 1.0;  // adversarial
  double k3 = 10.0; // cycle
  double a = 0.4;   // CIoU
  double b = 0.3;   // classification
  double c = 0.3;   // confidence

  void validate() const {
    for (double v : {k1, k2, k3, a, b, c})
      if (!(v >= 0) || !std::isfinite(v)) throw std::invalid_argument("loss weights must be finite and >= 0");
  }
};

struct LossReport {
  double total = 0, det = 0, adv = 0, cyc = 0;
  double det_ciou = 0, det_cls = 0, det_conf = 0;
  double critic = 0;  // critic-role objective of the same step
};

class NonFiniteLoss : public std::runtime_error {
 public:
  explicit NonFiniteLoss(std::string component)
      : std::runtime_error("non-finite loss component: " + component),
        component_(std::move(component)) {}
  const std::string& component() const { return component_; }

 private:
  std::string component_;
};

// ---- cycle / adversarial -------------------------------------------------

/// mean|F(G(x)) - x| + mean|G(F(y)) - y|
template <class T>
Var<T> cycle_loss(const Var<T>& x, const Var<T>& x_rec, const Var<T>& y, const Var<T>& y_rec) {
  if (x.shape() != x_rec.shape() || y.shape() != y_rec.shape())
    throw ShapeError("cycle_loss: reconstruction shape mismatch");
  return ops::add(ops::l1_loss(x_rec, x), ops::l1_loss(y_rec, y));
}

enum class AdversarialRole { generator, critic };

/// Least-squares objective. Critic: mean((real-1)^2) + mean(fake^2);
/// generator: mean((fake-1)^2). `real` is ignored in the generator role.
template <class T>
Var<T> adversarial_loss(const Var<T>& real_scores, const Var<T>& fake_scores,
                        AdversarialRole role) {
  if (role == AdversarialRole::generator) return ops::mse_const(fake_scores, T(1));
  return ops::add(ops::mse_const(real_scores, T(1)), ops::mse_const(fake_scores, T(0)));
}

// ---- CIoU ------------------------------------------------------------------

inline constexpr double kUnmatchedCiouPenalty = 2.5;  // supremum of 1 - CIoU

/// Differentiable 1 - CIoU for predicted boxes against constant targets; all
/// inputs are [M] vectors of (cx, cy, w, h).
template <class T>
Var<T> ciou_loss(const Var<T>& pcx, const Var<T>& pcy, const Var<T>& pw, const Var<T>& ph,
                 const std::vector<Box>& targets) {
  using namespace ops;
  const int M = static_cast<int>(targets.size());
  const T eps = T(1e-12);
  auto col = [&](auto f) {
    Tensor<T> t(Shape{M});
    for (int i = 0; i < M; ++i) t[i] = static_cast<T>(f(targets[i]));
    return constant(std::move(t));
  };
  auto gx1 = col([](const Box& b) { return b.x1(); });
  auto gy1 = col([](const Box& b) { return b.y1(); });
  auto gx2 = col([](const Box& b) { return b.x2(); });
  auto gy2 = col([](const Box& b) { return b.y2(); });
  auto gcx = col([](const Box& b) { return b.cx; });
  auto gcy = col([](const Box& b) { return b.cy; });
  auto garea = col([](const Box& b) { return b.area(); });
  auto gatan = col([](const Box& b) { return std::atan(b.w / b.h); });

  auto half_w = mul_scalar(pw, T(0.5)), half_h = mul_scalar(ph, T(0.5));
  auto px1 = sub(pcx, half_w), px2 = add(pcx, half_w);
  auto py1 = sub(pcy, half_h), py2 = add(pcy, half_h);

  auto iw = relu(sub(minimum(px2, gx2), maximum(px1, gx1)));
  auto ih = relu(sub(minimum(py2, gy2), maximum(py1, gy1)));
  auto inter = mul(iw, ih);
  auto uni = add_scalar(sub(add(mul(pw, ph), garea), inter), eps);
  auto iou_v = div(inter, uni);

  auto cw = sub(maximum(px2, gx2), minimum(px1, gx1));
  auto ch = sub(maximum(py2, gy2), minimum(py1, gy1));
  auto c2 = add_scalar(add(square(cw), square(ch)), eps);
  auto rho2 = add(square(sub(pcx, gcx)), square(sub(pcy, gcy)));

  const T k = static_cast<T>(4.0 / (std::numbers::pi * std::numbers::pi));
  auto v = mul_scalar(square(sub(gatan, atan(div(pw, ph)))), k);
  auto alpha = div(v, add_scalar(sub(v, iou_v), T(1) + eps));
  auto ciou = sub(sub(iou_v, div(rho2, c2)), mul(alpha, v));
  return add_scalar(mul_scalar(ciou, T(-1)), T(1));
}

// ---- detection loss --------------------------------------------------------

enum class MatchPolicy {
  /// Greedy best-IoU over all cells, IoU >= 0.5; unmatched GT get the
  /// maximal CIoU penalty. Used for the generator's detection loss.
  greedy_iou,
  /// Each GT is owned by the cell containing its centre. Used to train the
  /// detector itself, where an untrained model would otherwise never match.
  center_cell,
};

template <class T>
struct DetectionLoss {
  Var<T> ciou, cls, conf;
};

struct CellMatch {
  std::size_t gt = 0;
  int cell = -1;  // -1 when unmatched
};

/// Assigns GT boxes of image `n` to grid cells.
template <class T>
std::vector<CellMatch> match_cells(const DetectorMaps<T>& maps, int n, const BoxSet& gt,
                                   MatchPolicy policy, double iou_threshold = 0.5) {
  const int G = maps.grid_h(), Gw = maps.grid_w(), cells = G * Gw;
  std::vector<CellMatch> out(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) out[i].gt = i;
  if (policy == MatchPolicy::center_cell) {
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const int gx = std::clamp(static_cast<int>(gt.boxes[i].cx * Gw), 0, Gw - 1);
      const int gy = std::clamp(static_cast<int>(gt.boxes[i].cy * G), 0, G - 1);
      out[i].cell = gy * Gw + gx;
    }
    return out;
  }
  const auto& bv = maps.boxes.value();
  auto pred = [&](int c) {
    auto at = [&](int ch) {
      return static_cast<double>(bv[(static_cast<std::size_t>(n) * 4 + ch) * cells + c]);
    };
    return Box{0, at(0), at(1), at(2), at(3), 1.0};
  };
  struct Cand {
    double iou;
    std::size_t gt;
    int cell;
  };
  std::vector<Cand> cands;
  for (std::size_t i = 0; i < gt.size(); ++i)
    for (int c = 0; c < cells; ++c) {
      const double o = iou(pred(c), gt.boxes[i]);
      if (o >= iou_threshold) cands.push_back({o, i, c});
    }
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Cand& a, const Cand& b) { return a.iou > b.iou; });
  std::vector<bool> gt_used(gt.size(), false), cell_used(cells, false);
  for (const auto& c : cands) {
    if (gt_used[c.gt] || cell_used[c.cell]) continue;
    gt_used[c.gt] = true;
    cell_used[c.cell] = true;
    out[c.gt].cell = c.cell;
  }
  return out;
}

/// (L_ciou, L_cls, L_conf) from dense detector maps. L_ciou averages over GT
/// boxes, L_cls is BCE averaged over matched (box, class) entries, L_conf is
/// BCE averaged over every grid cell.
template <class T>
DetectionLoss<T> detection_loss_from_maps(const DetectorMaps<T>& maps,
                                          const std::vector<BoxSet>& ground_truth,
                                          MatchPolicy policy = MatchPolicy::greedy_iou) {
  const int N = maps.batch(), G = maps.grid_h(), Gw = maps.grid_w(), K = maps.num_classes();
  const int cells = G * Gw;
  if (static_cast<int>(ground_truth.size()) != N)
    throw std::invalid_argument("detection_loss: " + std::to_string(ground_truth.size()) +
                                " label sets for a batch of " + std::to_string(N));

  std::vector<std::size_t> idx_cx, idx_cy, idx_w, idx_h, idx_cls;
  std::vector<Box> matched_targets;
  Tensor<T> obj_target(maps.objectness.shape());
  std::vector<T> cls_t;
  int n_gt = 0, n_unmatched = 0;
  for (int n = 0; n < N; ++n) {
    const BoxSet& gt = ground_truth[n];
    n_gt += static_cast<int>(gt.size());
    for (const auto& m : match_cells(maps, n, gt, policy)) {
      const Box& g = gt.boxes[m.gt];
      int cell = m.cell;
      if (cell < 0) {
        ++n_unmatched;
        const int gx = std::clamp(static_cast<int>(g.cx * Gw), 0, Gw - 1);
        const int gy = std::clamp(static_cast<int>(g.cy * G), 0, G - 1);
        obj_target[static_cast<std::size_t>(n) * cells + gy * Gw + gx] = T(1);
        continue;
      }
      obj_target[static_cast<std::size_t>(n) * cells + cell] = T(1);
      auto box_idx = [&](int ch) { return (static_cast<std::size_t>(n) * 4 + ch) * cells + cell; };
      idx_cx.push_back(box_idx(0));
      idx_cy.push_back(box_idx(1));
      idx_w.push_back(box_idx(2));
      idx_h.push_back(box_idx(3));
      matched_targets.push_back(g);
      for (int k = 0; k < K; ++k) {
        idx_cls.push_back((static_cast<std::size_t>(n) * K + k) * cells + cell);
        cls_t.push_back(k == g.class_id ? T(1) : T(0));
      }
    }
  }

  DetectionLoss<T> out;
  const std::size_t M = matched_targets.size();
  if (n_gt == 0) {
    out.ciou = ops::constant(Tensor<T>::scalar(T(0)));
  } else if (M == 0) {
    out.ciou = ops::constant(Tensor<T>::scalar(static_cast<T>(kUnmatchedCiouPenalty)));
  } else {
    auto per_box = ciou_loss(ops::gather(maps.boxes, idx_cx), ops::gather(maps.boxes, idx_cy),
                             ops::gather(maps.boxes, idx_w), ops::gather(maps.boxes, idx_h),
                             matched_targets);
    auto total = ops::add_scalar(ops::sum(per_box),
                                 static_cast<T>(kUnmatchedCiouPenalty * n_unmatched));
    out.ciou = ops::mul_scalar(total, T(1) / static_cast<T>(n_gt));
  }
  if (M == 0) {
    out.cls = ops::constant(Tensor<T>::scalar(T(0)));
  } else {
    const int n_cls = static_cast<int>(cls_t.size());
    Tensor<T> target(Shape{n_cls}, std::move(cls_t));
    out.cls = ops::mul_scalar(ops::bce_with_logits_sum(ops::gather(maps.class_logits, idx_cls), target),
                              T(1) / static_cast<T>(target.size()));
  }
  out.conf = ops::mul_scalar(ops::bce_with_logits_sum(maps.objectness, obj_target),
                             T(1) / static_cast<T>(obj_target.size()));
  return out;
}

template <class T>
DetectionLoss<T> detection_loss(const Var<T>& generated, const std::vector<BoxSet>& ground_truth,
                                const Detector<T>& detector,
                                MatchPolicy policy = MatchPolicy::greedy_iou) {
  return detection_loss_from_maps(detector.forward(generated), ground_truth, policy);
}

// ---- weighted totals -------------------------------------------------------

template <class T>
Var<T> weighted_detection(const DetectionLoss<T>& d, const LossWeights& w) {
  return ops::add(ops::add(ops::mul_scalar(d.ciou, static_cast<T>(w.a)),
                           ops::mul_scalar(d.cls, static_cast<T>(w.b))),
                  ops::mul_scalar(d.conf, static_cast<T>(w.c)));
}

/// Scalar form of the weighted objective; throws on any non-finite input.
inline LossReport total_loss(double det_ciou, double det_cls, double det_conf, double adv,
                             double cyc, const LossWeights& w) {
  const std::pair<const char*, double> parts[] = {
      {"det_ciou", det_ciou}, {"det_cls", det_cls}, {"det_conf", det_conf},
      {"adv", adv},           {"cyc", cyc}};
  for (const auto& [name, v] : parts)
    if (!std::isfinite(v)) throw NonFiniteLoss(name);
  LossReport r;
  r.det_ciou = det_ciou;
  r.det_cls = det_cls;
  r.det_conf = det_conf;
  r.det = w.a * det_ciou + w.b * det_cls + w.c * det_conf;
  r.adv = adv;
  r.cyc = cyc;
  r.total = w.k1 * r.det + w.k2 * adv + w.k3 * cyc;
  return r;
}

}  // namespace sgan
