#pragma once

// Training and retraining of the toy detector under a fixed seed and budget,
// plus a directory format for trained detectors.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "sgan/core/optim.hpp"
#include "sgan/data.hpp"
#include "sgan/detector.hpp"
#include "sgan/evaluation.hpp"
#include "sgan/losses.hpp"

namespace sgan {

struct DetectorTrainConfig {
  int iterations = 5000;
  int batch_size = 8;
  double lr = 1e-3;
  double ciou_weight = 1.0;
  double cls_weight = 1.0;
  double conf_weight = 4.0;
  bool flip_augment = true;
  bool deduplicate = true;
  std::uint64_t seed = 7;
};

struct LabelledImage {
  Image image;
  BoxSet labels;
};

/// Every sample of `ds`; all of them must carry labels.
inline std::vector<LabelledImage> labelled_images(const DomainDataset& ds) {
  std::vector<LabelledImage> out;
  out.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Sample& s = ds.sample(i);
    if (!s.labels) throw std::invalid_argument("image " + s.name + " has no label set");
    out.push_back({ds.image(i), *s.labels});
  }
  return out;
}

/// Pairs images with label sets; counts must agree.
inline std::vector<LabelledImage> zip_labelled(std::vector<Image> images, std::vector<BoxSet> labels) {
  if (images.size() != labels.size())
    throw std::invalid_argument("label/image count mismatch: " + std::to_string(labels.size()) +
                                " label sets for " + std::to_string(images.size()) + " images");
  std::vector<LabelledImage> out;
  for (std::size_t i = 0; i < images.size(); ++i) out.push_back({std::move(images[i]), std::move(labels[i])});
  return out;
}

namespace detail {
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) h = (h ^ p[i]) * 1099511628211ULL;
  return h;
}

inline std::uint64_t content_key(const LabelledImage& li) {
  std::uint64_t h = fnv1a(li.image.rgb.data(), li.image.rgb.size());
  const int dims[2] = {li.image.width, li.image.height};
  h = fnv1a(dims, sizeof(dims), h);
  for (const auto& b : li.labels) {
    const double v[5] = {static_cast<double>(b.class_id), b.cx, b.cy, b.w, b.h};
    h = fnv1a(v, sizeof(v), h);
  }
  return h;
}

inline LabelledImage hflip(const LabelledImage& li) {
  LabelledImage out{Image(li.image.width, li.image.height), {}};
  for (int y = 0; y < li.image.height; ++y)
    for (int x = 0; x < li.image.width; ++x)
      for (int c = 0; c < 3; ++c) out.image.at(x, y, c) = li.image.at(li.image.width - 1 - x, y, c);
  for (Box b : li.labels) {
    b.cx = 1.0 - b.cx;
    out.labels.boxes.push_back(b);
  }
  return out;
}
}  // namespace detail

/// Drops exact duplicates (same pixels and labels), keeping first occurrences.
inline std::vector<LabelledImage> deduplicate(const std::vector<LabelledImage>& in) {
  std::unordered_set<std::uint64_t> seen;
  std::vector<LabelledImage> out;
  for (const auto& li : in)
    if (seen.insert(detail::content_key(li)).second) out.push_back(li);
  return out;
}

/// Trains a fresh toy detector. The result depends only on (data, cfg, tcfg).
inline std::shared_ptr<ToyDetector<float>> train_detector(std::vector<LabelledImage> data,
                                                          const DetectorConfig& cfg,
                                                          const DetectorTrainConfig& tcfg) {
  if (data.empty()) throw std::invalid_argument("train_detector: no training images");
  if (tcfg.deduplicate) data = deduplicate(data);
  for (const auto& li : data)
    if (li.image.width != cfg.image_size || li.image.height != cfg.image_size)
      throw std::invalid_argument("train_detector: images must be " + std::to_string(cfg.image_size) +
                                  "x" + std::to_string(cfg.image_size));
  nn::Rng rng(tcfg.seed);
  auto det = std::make_shared<ToyDetector<float>>(cfg, rng);
  optim::Adam<float> opt(det->parameters(), {tcfg.lr, 0.9, 0.999, 1e-8});
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::bernoulli_distribution flip(0.5);
  const int S = cfg.image_size;
  for (int it = 0; it < tcfg.iterations; ++it) {
    Tensor<float> batch(Shape{tcfg.batch_size, 3, S, S});
    std::vector<BoxSet> labels;
    for (int n = 0; n < tcfg.batch_size; ++n) {
      const LabelledImage& li = data[pick(rng)];
      if (tcfg.flip_augment && flip(rng)) {
        const auto f = detail::hflip(li);
        image_to_tensor(f.image, batch, n);
        labels.push_back(f.labels);
      } else {
        image_to_tensor(li.image, batch, n);
        labels.push_back(li.labels);
      }
    }
    opt.zero_grad();
    auto maps = det->forward(Var<float>(batch));
    auto l = detection_loss_from_maps(maps, labels, MatchPolicy::center_cell);
    auto total = ops::add(ops::add(ops::mul_scalar(l.ciou, static_cast<float>(tcfg.ciou_weight)),
                                   ops::mul_scalar(l.cls, static_cast<float>(tcfg.cls_weight))),
                          ops::mul_scalar(l.conf, static_cast<float>(tcfg.conf_weight)));
    if (!std::isfinite(total.value().item())) throw NonFiniteLoss("detector");
    backward(total);
    opt.step();
  }
  return det;
}

/// Training settings: base only (1), base plus real adverse images (2), or
/// base plus generated images with inherited labels (3).
inline FrozenDetector<float> retrain_detector(const std::vector<LabelledImage>& base,
                                              const std::vector<LabelledImage>& added,
                                              const DetectorConfig& cfg,
                                              const DetectorTrainConfig& tcfg) {
  std::vector<LabelledImage> all = base;
  all.insert(all.end(), added.begin(), added.end());
  return FrozenDetector<float>(train_detector(std::move(all), cfg, tcfg));
}

template <class T>
std::vector<BoxSet> detect_images(const ToyDetector<T>& det, const std::vector<Image>& images,
                                  int batch = 16) {
  std::vector<BoxSet> out;
  for (std::size_t start = 0; start < images.size(); start += batch) {
    const int n = static_cast<int>(std::min<std::size_t>(batch, images.size() - start));
    Tensor<T> t(Shape{n, 3, images[start].height, images[start].width});
    for (int i = 0; i < n; ++i) image_to_tensor(images[start + i], t, i);
    for (auto& b : det.detect(t)) out.push_back(std::move(b));
  }
  return out;
}

template <class T>
DetectionStats evaluate_detector(const ToyDetector<T>& det, const std::vector<LabelledImage>& test,
                                 double iou_threshold = 0.5) {
  std::vector<Image> images;
  std::vector<BoxSet> gts;
  for (const auto& li : test) {
    images.push_back(li.image);
    gts.push_back(li.labels);
  }
  return evaluate_map(detect_images(det, images), gts, iou_threshold);
}

// ---- detector directories: detector.json + weights.bin ------------------------

inline void save_detector(const std::filesystem::path& dir, const ToyDetector<float>& det) {
  std::filesystem::create_directories(dir);
  const auto& c = det.config();
  nlohmann::ordered_json j = {{"format", "sgan-toy-detector-v1"},
                              {"in_channels", c.in_channels},
                              {"num_classes", c.num_classes},
                              {"image_size", c.image_size},
                              {"width", c.width},
                              {"num_downsample", c.num_downsample},
                              {"conf_threshold", c.conf_threshold},
                              {"nms_iou", c.nms_iou}};
  std::ofstream(dir / "detector.json") << j.dump(2) << '\n';
  nn::save_parameters<float>((dir / "weights.bin").string(), det.parameters());
}

inline std::shared_ptr<ToyDetector<float>> load_detector(const std::filesystem::path& dir) {
  std::ifstream is(dir / "detector.json");
  if (!is) throw std::runtime_error("cannot read " + (dir / "detector.json").string());
  const auto j = nlohmann::json::parse(is);
  if (j.value("format", "") != "sgan-toy-detector-v1")
    throw std::runtime_error((dir / "detector.json").string() + ": unknown detector format");
  DetectorConfig c;
  c.in_channels = j.at("in_channels");
  c.num_classes = j.at("num_classes");
  c.image_size = j.at("image_size");
  c.width = j.at("width");
  c.num_downsample = j.at("num_downsample");
  c.conf_threshold = j.at("conf_threshold");
  c.nms_iou = j.at("nms_iou");
  nn::Rng rng(0);
  auto det = std::make_shared<ToyDetector<float>>(c, rng);
  nn::load_parameters<float>((dir / "weights.bin").string(), det->parameters());
  return det;
}

}  // namespace sgan
