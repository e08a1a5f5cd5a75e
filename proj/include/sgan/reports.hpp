#pragma once

// CSV and Markdown renderings of metric, detection and scale-selection
// results, plus the CSV reader for scale candidates.

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sgan/evaluation.hpp"
#include "sgan/metrics.hpp"

namespace sgan {

namespace detail {
inline std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}
}  // namespace detail

/// Full-scale reference values. They need the real datasets and a GPU
/// budget, so they are reported beside desk-scale results, never asserted.
struct ReferenceTarget {
  std::string quantity;
  double value;
};

inline std::vector<ReferenceTarget> reference_targets() {
  return {{"FID, AllRain rainy (normal-to-adverse)", 55.2},
          {"mAP, retrained detector, rainy", 0.422},
          {"mAP, retrained detector, night", 0.469},
          {"training wall-clock on one V100 (hours)", 15.5}};
}

inline std::string reference_markdown() {
  std::string s = "| Quantity | Full-scale reference |\n|---|---|\n";
  for (const auto& t : reference_targets()) s += "| " + t.quantity + " | " + detail::fmt(t.value, 3) + " |\n";
  return s;
}

// ---- FID / KID -----------------------------------------------------------------

struct MetricRow {
  std::string dataset;
  std::string method;
  double fid = 0;
  KidResult kid;
};

inline std::string metric_csv(const std::vector<MetricRow>& rows) {
  std::string s = "dataset,method,fid,kid_mean,kid_std\n";
  for (const auto& r : rows)
    s += r.dataset + "," + r.method + "," + detail::fmt(r.fid) + "," + detail::fmt(r.kid.mean, 6) +
         "," + detail::fmt(r.kid.stddev, 6) + "\n";
  return s;
}

inline std::string metric_markdown(const std::vector<MetricRow>& rows) {
  std::string s = "| Dataset | Method | FID | KID |\n|---|---|---|---|\n";
  for (const auto& r : rows)
    s += "| " + r.dataset + " | " + r.method + " | " + detail::fmt(r.fid, 2) + " | " +
         detail::fmt(r.kid.mean, 4) + " ± " + detail::fmt(r.kid.stddev, 4) + " |\n";
  return s;
}

// ---- detection -----------------------------------------------------------------

struct DetectionRow {
  std::string dataset;
  std::string setting;
  DetectionStats stats;
};

inline std::string detection_csv(const std::vector<DetectionRow>& rows) {
  std::string s = "dataset,setting,map,fn,fp,tp,per_class_ap\n";
  for (const auto& r : rows) {
    std::string per;
    for (const auto& [cls, ap] : r.stats.per_class_ap)
      per += (per.empty() ? "" : ";") + std::to_string(cls) + ":" + detail::fmt(ap);
    s += r.dataset + "," + r.setting + "," + detail::fmt(r.stats.map) + "," + std::to_string(r.stats.fn) +
         "," + std::to_string(r.stats.fp) + "," + std::to_string(r.stats.tp) + "," + per + "\n";
  }
  return s;
}

inline std::string detection_markdown(const std::vector<DetectionRow>& rows) {
  std::string s = "| Dataset | Training setting | mAP | FN | FP | TP |\n|---|---|---|---|---|---|\n";
  for (const auto& r : rows)
    s += "| " + r.dataset + " | " + r.setting + " | " + detail::fmt(r.stats.map, 3) + " | " +
         std::to_string(r.stats.fn) + " | " + std::to_string(r.stats.fp) + " | " +
         std::to_string(r.stats.tp) + " |\n";
  return s;
}

// ---- Pareto ---------------------------------------------------------------------

/// Reads `scale,fid,map` rows (header required), e.g. `1/4,67.3,0.422`.
inline std::vector<ScaleCandidate> parse_candidates(std::istream& is, const std::string& origin = "<stream>") {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(origin + ": empty candidate file");
  if (line.rfind("scale,fid,map", 0) != 0) throw std::runtime_error(origin + ": expected header scale,fid,map");
  std::vector<ScaleCandidate> out;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::stringstream ls(line);
    std::string scale, fid, map;
    if (!std::getline(ls, scale, ',') || !std::getline(ls, fid, ',') || !std::getline(ls, map))
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": malformed candidate row");
    try {
      out.push_back({Fraction::parse(scale), std::stod(fid), std::stod(map)});
    } catch (const std::exception& e) {
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::string pareto_csv(const std::vector<ScaleCandidate>& all, const std::vector<ScaleCandidate>& front) {
  std::string s = "scale,fid,map,on_front\n";
  for (const auto& c : all) {
    bool on = false;
    for (const auto& f : front) on = on || (f.scale == c.scale && f.fid == c.fid && f.map == c.map);
    s += c.scale.str() + "," + detail::fmt(c.fid, 3) + "," + detail::fmt(c.map, 3) + "," + (on ? "1" : "0") + "\n";
  }
  return s;
}

inline std::string pareto_markdown(const std::vector<ScaleCandidate>& front) {
  std::string s = "| Down-sampling scale | FID | mAP |\n|---|---|---|\n";
  for (const auto& c : front)
    s += "| " + c.scale.str() + " | " + detail::fmt(c.fid, 1) + " | " + detail::fmt(c.map, 3) + " |\n";
  return s;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << text;
}

}  // namespace sgan
