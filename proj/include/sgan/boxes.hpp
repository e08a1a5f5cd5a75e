#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sgan {

/// Normalised centre-size box. Ground truth carries confidence 1.
struct Box {
  int class_id = 0;
  double cx = 0, cy = 0, w = 0, h = 0;
  double confidence = 1.0;

  double x1() const { return cx - w / 2; }
  double y1() const { return cy - h / 2; }
  double x2() const { return cx + w / 2; }
  double y2() const { return cy + h / 2; }
  double area() const { return w * h; }

  static Box from_corners(int cls, double x1, double y1, double x2, double y2, double conf = 1.0) {
    return {cls, (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1, conf};
  }
};

struct BoxSet {
  std::vector<Box> boxes;

  std::size_t size() const { return boxes.size(); }
  bool empty() const { return boxes.empty(); }
  auto begin() const { return boxes.begin(); }
  auto end() const { return boxes.end(); }

  void validate() const {
    for (const auto& b : boxes) {
      if (!(b.w > 0 && b.h > 0))
        throw std::invalid_argument("box with non-positive size");
      if (!(b.confidence >= 0 && b.confidence <= 1))
        throw std::invalid_argument("box confidence outside [0,1]");
    }
  }
};

inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

/// Per-class greedy suppression; keeps the higher-confidence box of any pair
/// with IoU above `iou_threshold`. Stable for equal confidences.
inline BoxSet nms(const BoxSet& in, double iou_threshold) {
  std::vector<std::size_t> order(in.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return in.boxes[a].confidence > in.boxes[b].confidence;
  });
  BoxSet out;
  for (std::size_t i : order) {
    const Box& cand = in.boxes[i];
    bool keep = true;
    for (const Box& kept : out.boxes)
      if (kept.class_id == cand.class_id && iou(kept, cand) > iou_threshold) {
        keep = false;
        break;
      }
    if (keep) out.boxes.push_back(cand);
  }
  return out;
}

// ---- YOLO-style label files ----------------------------------------------
//
// One line per box: `class cx cy w h` for ground truth, with a trailing
// confidence for predictions.

inline BoxSet parse_labels(std::istream& is, const std::string& origin = "<stream>") {
  BoxSet out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    Box b;
    if (!(ls >> b.class_id >> b.cx >> b.cy >> b.w >> b.h))
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": malformed label line");
    double conf;
    if (ls >> conf) b.confidence = conf;
    out.boxes.push_back(b);
  }
  return out;
}

inline BoxSet read_labels(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw std::runtime_error("cannot read label file " + p.string());
  return parse_labels(is, p.string());
}

inline void write_labels(const std::filesystem::path& p, const BoxSet& set,
                         bool with_confidence = false) {
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write label file " + p.string());
  os << std::setprecision(9);
  for (const auto& b : set.boxes) {
    os << b.class_id << ' ' << b.cx << ' ' << b.cy << ' ' << b.w << ' ' << b.h;
    if (with_confidence) os << ' ' << b.confidence;
    os << '\n';
  }
}

}  // namespace sgan
