#pragma once

// VOC-style detection evaluation: all-point interpolated AP per class,
// mAP over classes present in the ground truth, and FN/FP/TP counts.

#include <algorithm>
#include <map>
#include <ostream>
#include <set>
#include <stdexcept>
#include <vector>

#include "sgan/boxes.hpp"

namespace sgan {

struct DetectionStats {
  int fn = 0;
  int fp = 0;
  int tp = 0;
  std::map<int, double> per_class_ap;
  double map = 0.0;
};

class EvaluationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Area under the monotone precision envelope; `recall` non-decreasing.
inline double envelope_ap(const std::vector<double>& recall, const std::vector<double>& precision) {
  std::vector<double> mrec{0.0}, mpre{0.0};
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mpre.insert(mpre.end(), precision.begin(), precision.end());
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
  double ap = 0.0;
  for (std::size_t i = 1; i < mrec.size(); ++i)
    if (mrec[i] != mrec[i - 1]) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
  return ap;
}

inline DetectionStats evaluate_map(const std::vector<BoxSet>& predictions,
                                   const std::vector<BoxSet>& ground_truths,
                                   double iou_threshold = 0.5) {
  if (predictions.size() != ground_truths.size())
    throw EvaluationError("prediction/ground-truth image counts differ: " +
                          std::to_string(predictions.size()) + " vs " +
                          std::to_string(ground_truths.size()));
  std::set<int> classes;
  int total_gt = 0;
  for (const auto& g : ground_truths)
    for (const auto& b : g) {
      classes.insert(b.class_id);
      ++total_gt;
    }
  if (total_gt == 0) throw EvaluationError("no ground-truth boxes; mAP is undefined");

  struct Ranked {
    double conf;
    std::size_t image, index;
  };
  DetectionStats stats;
  std::set<int> pred_classes = classes;
  for (const auto& p : predictions)
    for (const auto& b : p) pred_classes.insert(b.class_id);

  double ap_sum = 0.0;
  for (int cls : pred_classes) {
    std::vector<Ranked> ranked;
    for (std::size_t i = 0; i < predictions.size(); ++i)
      for (std::size_t j = 0; j < predictions[i].size(); ++j)
        if (predictions[i].boxes[j].class_id == cls)
          ranked.push_back({predictions[i].boxes[j].confidence, i, j});
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const Ranked& a, const Ranked& b) { return a.conf > b.conf; });

    int n_gt = 0;
    std::vector<std::vector<bool>> used(ground_truths.size());
    for (std::size_t i = 0; i < ground_truths.size(); ++i) {
      used[i].assign(ground_truths[i].size(), false);
      for (const auto& b : ground_truths[i]) n_gt += (b.class_id == cls);
    }

    std::vector<double> recall, precision;
    int tp = 0, fp = 0;
    for (const auto& r : ranked) {
      const Box& p = predictions[r.image].boxes[r.index];
      double best = -1.0;
      std::size_t best_j = 0;
      const auto& gts = ground_truths[r.image].boxes;
      for (std::size_t j = 0; j < gts.size(); ++j) {
        if (gts[j].class_id != cls) continue;
        const double o = iou(p, gts[j]);
        if (o > best) {
          best = o;
          best_j = j;
        }
      }
      if (best >= iou_threshold && !used[r.image][best_j]) {
        used[r.image][best_j] = true;
        ++tp;
      } else {
        ++fp;
      }
      if (n_gt > 0) {
        recall.push_back(static_cast<double>(tp) / n_gt);
        precision.push_back(static_cast<double>(tp) / (tp + fp));
      }
    }
    stats.tp += tp;
    stats.fp += fp;
    if (classes.count(cls)) {
      const double ap = ranked.empty() ? 0.0 : envelope_ap(recall, precision);
      stats.per_class_ap[cls] = ap;
      ap_sum += ap;
    }
  }
  stats.fn = total_gt - stats.tp;
  stats.map = ap_sum / static_cast<double>(classes.size());
  return stats;
}

}  // namespace sgan
