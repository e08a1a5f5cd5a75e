#pragma once

// Unpaired two-domain data: 8-bit RGB images, crop/resize policies that keep
// YOLO labels consistent, and a synthetic day/dark toy domain.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "sgan/boxes.hpp"
#include "sgan/core/tensor.hpp"

namespace sgan {

/// Interleaved 8-bit RGB, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}

  std::uint8_t& at(int x, int y, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int x, int y, int c) const {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  double mean_intensity() const {
    double s = 0;
    for (auto v : rgb) s += v;
    return rgb.empty() ? 0.0 : s / static_cast<double>(rgb.size());
  }
  friend bool operator==(const Image&, const Image&) = default;
};

/// Writes image `img` into batch slot `n` of an [N,3,H,W] tensor, mapping
/// 0..255 onto [-1,1].
template <class T>
void image_to_tensor(const Image& img, Tensor<T>& batch, int n) {
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        batch.at(n, c, y, x) = static_cast<T>(img.at(x, y, c)) / T(127.5) - T(1);
}

template <class T>
Tensor<T> image_to_tensor(const Image& img) {
  Tensor<T> t(Shape{1, 3, img.height, img.width});
  image_to_tensor(img, t, 0);
  return t;
}

template <class T>
Image tensor_to_image(const Tensor<T>& batch, int n = 0) {
  Image img(batch.dim(3), batch.dim(2));
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        const double v = (static_cast<double>(batch.at(n, c, y, x)) + 1.0) * 127.5;
        img.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
  return img;
}

/// Bilinear resize with half-pixel centres.
inline Image resize_bilinear(const Image& src, int w, int h) {
  if (w == src.width && h == src.height) return src;
  Image out(w, h);
  const double sx = static_cast<double>(src.width) / w, sy = static_cast<double>(src.height) / h;
  for (int y = 0; y < h; ++y) {
    const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
    const int y0 = std::min(static_cast<int>(fy), src.height - 1);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double ly = fy - y0;
    for (int x = 0; x < w; ++x) {
      const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
      const int x0 = std::min(static_cast<int>(fx), src.width - 1);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double lx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = (1 - lx) * src.at(x0, y0, c) + lx * src.at(x1, y0, c);
        const double bot = (1 - lx) * src.at(x0, y1, c) + lx * src.at(x1, y1, c);
        out.at(x, y, c) = static_cast<std::uint8_t>(std::lround((1 - ly) * top + ly * bot));
      }
    }
  }
  return out;
}

inline Image crop(const Image& src, int x0, int y0, int w, int h) {
  Image out(w, h);
  for (int y = 0; y < h; ++y)
    std::copy_n(&src.rgb[(static_cast<std::size_t>(y0 + y) * src.width + x0) * 3],
                static_cast<std::size_t>(w) * 3, &out.rgb[static_cast<std::size_t>(y) * w * 3]);
  return out;
}

// ---- crop policy -----------------------------------------------------------

enum class CropMode { random, center };

struct CropPolicy {
  std::optional<int> resize_width;  // keep aspect ratio
  int crop_size = 360;
  CropMode mode = CropMode::random;

  static CropPolicy allrain() { return {1080, 360, CropMode::random}; }
  static CropPolicy bdd100k_adv() { return {std::nullopt, 720, CropMode::random}; }
  static CropPolicy toy() { return {std::nullopt, 64, CropMode::random}; }
};

inline constexpr double kMinSurvivingArea = 0.25;

/// Maps boxes (normalised to the full image of size img_w x img_h) into the
/// crop window, clipping at its borders; boxes keeping under 25% of their
/// area are dropped.
inline BoxSet crop_boxes(const BoxSet& in, int img_w, int img_h, int x0, int y0, int cw, int ch) {
  BoxSet out;
  for (const Box& b : in) {
    const double bx1 = b.x1() * img_w, by1 = b.y1() * img_h;
    const double bx2 = b.x2() * img_w, by2 = b.y2() * img_h;
    const double cx1 = std::max(bx1, static_cast<double>(x0));
    const double cy1 = std::max(by1, static_cast<double>(y0));
    const double cx2 = std::min(bx2, static_cast<double>(x0 + cw));
    const double cy2 = std::min(by2, static_cast<double>(y0 + ch));
    if (cx2 <= cx1 || cy2 <= cy1) continue;
    const double kept = (cx2 - cx1) * (cy2 - cy1);
    if (kept < kMinSurvivingArea * (bx2 - bx1) * (by2 - by1)) continue;
    out.boxes.push_back(Box::from_corners(b.class_id, (cx1 - x0) / cw, (cy1 - y0) / ch,
                                          (cx2 - x0) / cw, (cy2 - y0) / ch, b.confidence));
  }
  return out;
}

/// Inverse of crop_boxes for boxes that were not clipped.
inline Box uncrop_box(const Box& b, int img_w, int img_h, int x0, int y0, int cw, int ch) {
  return {b.class_id, (b.cx * cw + x0) / img_w, (b.cy * ch + y0) / img_h, b.w * cw / img_w,
          b.h * ch / img_h, b.confidence};
}

// ---- datasets ----------------------------------------------------------------

enum class Domain { source, target };

struct Sample {
  std::string name;                    // file stem
  std::filesystem::path image_path;    // empty for in-memory samples
  std::shared_ptr<const Image> pixels; // set for in-memory samples
  std::optional<BoxSet> labels;
};

/// Image loader used for on-disk samples; set by image_io.hpp.
using ImageLoader = std::function<Image(const std::filesystem::path&)>;

class DomainDataset {
 public:
  DomainDataset() = default;
  DomainDataset(std::filesystem::path root, Domain domain, std::vector<Sample> samples,
                ImageLoader loader = {})
      : root_(std::move(root)), domain_(domain), samples_(std::move(samples)),
        loader_(std::move(loader)) {}

  const std::filesystem::path& root() const { return root_; }
  Domain domain() const { return domain_; }
  std::size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }
  const Sample& sample(std::size_t i) const { return samples_.at(i); }
  const std::vector<Sample>& samples() const { return samples_; }

  Image image(std::size_t i) const {
    const Sample& s = samples_.at(i);
    if (s.pixels) return *s.pixels;
    if (!loader_) throw std::runtime_error("no image loader for " + s.image_path.string());
    Image img = loader_(s.image_path);
    return img;
  }

  bool fully_labelled() const {
    return std::all_of(samples_.begin(), samples_.end(),
                       [](const Sample& s) { return s.labels.has_value(); });
  }

  /// Source images must carry labels whenever the detection loss is on.
  void require_labels() const {
    for (const auto& s : samples_)
      if (!s.labels) throw std::runtime_error("missing labels for source image " + s.name);
  }

  void add(Sample s) { samples_.push_back(std::move(s)); }

 private:
  std::filesystem::path root_;
  Domain domain_ = Domain::source;
  std::vector<Sample> samples_;
  ImageLoader loader_;
};

template <class T>
struct PairBatch {
  Tensor<T> x;                 // source, [N,3,S,S] in [-1,1]
  std::vector<BoxSet> labels;  // crop-adjusted source labels
  Tensor<T> y;                 // target, independently sampled
  std::vector<std::size_t> source_index, target_index;
};

namespace detail {
struct Cropped {
  Image image;
  BoxSet labels;
};

inline Cropped apply_policy(const Image& raw, const std::optional<BoxSet>& labels,
                            const CropPolicy& policy, std::mt19937_64& rng) {
  Image img = raw;
  if (policy.resize_width && *policy.resize_width != img.width) {
    const int w = *policy.resize_width;
    const int h = static_cast<int>(std::lround(static_cast<double>(img.height) * w / img.width));
    img = resize_bilinear(img, w, h);
  }
  const int cs = policy.crop_size;
  if (cs > img.width || cs > img.height)
    throw std::invalid_argument("crop size " + std::to_string(cs) + " exceeds image " +
                                std::to_string(img.width) + "x" + std::to_string(img.height));
  int x0 = (img.width - cs) / 2, y0 = (img.height - cs) / 2;
  if (policy.mode == CropMode::random) {
    x0 = std::uniform_int_distribution<int>(0, img.width - cs)(rng);
    y0 = std::uniform_int_distribution<int>(0, img.height - cs)(rng);
  }
  Cropped out{crop(img, x0, y0, cs, cs), {}};
  if (labels) out.labels = crop_boxes(*labels, img.width, img.height, x0, y0, cs, cs);
  return out;
}
}  // namespace detail

/// Draws `batch_size` unpaired (x, y) samples. Source crops that lose every
/// box are redrawn rather than passed on with empty labels.
template <class T>
PairBatch<T> load_pair_batch(const DomainDataset& src, const DomainDataset& tgt,
                             const CropPolicy& policy, std::uint64_t seed, int batch_size = 1) {
  if (src.empty() || tgt.empty()) throw std::invalid_argument("load_pair_batch: empty dataset");
  std::mt19937_64 rng(seed);
  const int cs = policy.crop_size;
  PairBatch<T> out;
  out.x = Tensor<T>(Shape{batch_size, 3, cs, cs});
  out.y = Tensor<T>(Shape{batch_size, 3, cs, cs});
  std::uniform_int_distribution<std::size_t> pick_src(0, src.size() - 1), pick_tgt(0, tgt.size() - 1);
  constexpr int kMaxAttempts = 100;
  for (int n = 0; n < batch_size; ++n) {
    bool ok = false;
    for (int attempt = 0; attempt < kMaxAttempts && !ok; ++attempt) {
      const std::size_t i = pick_src(rng);
      const Sample& s = src.sample(i);
      auto c = detail::apply_policy(src.image(i), s.labels, policy, rng);
      if (s.labels && !s.labels->empty() && c.labels.empty()) continue;
      image_to_tensor(c.image, out.x, n);
      out.labels.push_back(std::move(c.labels));
      out.source_index.push_back(i);
      ok = true;
    }
    if (!ok) throw std::runtime_error("could not draw a source crop that keeps any labelled box");
    const std::size_t j = pick_tgt(rng);
    auto c = detail::apply_policy(tgt.image(j), std::nullopt, policy, rng);
    image_to_tensor(c.image, out.y, n);
    out.target_index.push_back(j);
  }
  return out;
}

// ---- synthetic toy domain -----------------------------------------------------

inline constexpr int kToyImageSize = 64;
inline constexpr int kToyNumClasses = 2;

struct ToyAdverseParams {
  double brightness = 0.45;
  int streaks = 25;
  int streak_gain = 60;
};

namespace detail {
inline std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

// Scene generation draws from its own stream so the adverse variant of a
// seed has exactly the same geometry.
inline std::pair<Image, BoxSet> toy_scene(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto uni = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  const int S = kToyImageSize;
  Image img(S, S);
  const int horizon = uni(22, 30);
  const int sky[3] = {uni(150, 185), uni(170, 200), uni(205, 235)};
  const int road = uni(95, 125);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const int noise = uni(-8, 8);
      for (int c = 0; c < 3; ++c) {
        const double base = y < horizon ? sky[c] - 0.6 * y : road + 0.4 * (y - horizon);
        img.at(x, y, c) = clamp_u8(base + noise);
      }
    }
  // dashed lane marking
  for (int y = horizon + 4; y < S; y += 6)
    for (int dy = 0; dy < 3 && y + dy < S; ++dy)
      for (int dx = -1; dx <= 0; ++dx)
        for (int c = 0; c < 3; ++c) img.at(S / 2 + dx, y + dy, c) = 225;

  static constexpr int car_colors[][3] = {{220, 40, 40}, {40, 80, 225}, {235, 205, 40}, {245, 245, 245}};
  static constexpr int ped_colors[][3] = {{40, 200, 80}, {205, 60, 205}, {250, 140, 30}};
  BoxSet boxes;
  const int count = uni(1, 3);
  for (int attempt = 0; attempt < 60 && static_cast<int>(boxes.size()) < count; ++attempt) {
    const int cls = uni(0, kToyNumClasses - 1);
    const int w = cls == 0 ? uni(12, 22) : uni(7, 11);
    const int h = cls == 0 ? uni(8, 13) : uni(13, 19);
    const int x0 = uni(1, S - w - 1), y0 = uni(std::max(1, horizon - h / 2), S - h - 1);
    const Box cand = Box::from_corners(cls, static_cast<double>(x0) / S, static_cast<double>(y0) / S,
                                       static_cast<double>(x0 + w) / S, static_cast<double>(y0 + h) / S);
    bool overlaps = false;
    for (const auto& b : boxes)
      overlaps = overlaps || (std::min(b.x2(), cand.x2()) > std::max(b.x1(), cand.x1()) - 2.0 / S &&
                              std::min(b.y2(), cand.y2()) > std::max(b.y1(), cand.y1()) - 2.0 / S);
    if (overlaps) continue;
    const int* col = cls == 0 ? car_colors[uni(0, 3)] : ped_colors[uni(0, 2)];
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x) {
        bool inside = true;
        if (cls == 1) {
          const double ex = (x + 0.5 - x0 - w / 2.0) / (w / 2.0);
          const double ey = (y + 0.5 - y0 - h / 2.0) / (h / 2.0);
          inside = ex * ex + ey * ey <= 1.0;
        } else if (y >= y0 + h - 2 && (x < x0 + 3 || x >= x0 + w - 3)) {
          // wheels
          for (int c = 0; c < 3; ++c) img.at(x, y, c) = 25;
          continue;
        }
        if (!inside) continue;
        for (int c = 0; c < 3; ++c) img.at(x, y, c) = static_cast<std::uint8_t>(col[c]);
      }
    if (cls == 0)  // windscreen band
      for (int x = x0 + 2; x < x0 + w - 2; ++x)
        for (int c = 0; c < 3; ++c) img.at(x, y0 + 2, c) = 60;
    boxes.boxes.push_back(cand);
  }
  return {std::move(img), std::move(boxes)};
}
}  // namespace detail

/// Darkening plus bright diagonal streaks; purely photometric.
inline Image apply_adverse(const Image& in, std::uint64_t seed, const ToyAdverseParams& p = {}) {
  std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ULL);
  Image out = in;
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) {
      out.at(x, y, 0) = detail::clamp_u8(p.brightness * in.at(x, y, 0) * 0.85);
      out.at(x, y, 1) = detail::clamp_u8(p.brightness * in.at(x, y, 1) * 0.95);
      out.at(x, y, 2) = detail::clamp_u8(p.brightness * in.at(x, y, 2) * 1.15);
    }
  std::uniform_int_distribution<int> px(0, out.width - 1), py(0, out.height - 1), len(5, 10);
  for (int s = 0; s < p.streaks; ++s) {
    int x = px(rng), y = py(rng);
    const int l = len(rng);
    for (int t = 0; t < l && x >= 0 && y < out.height; ++t, y += 2, --x)
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = detail::clamp_u8(out.at(x, y, c) + p.streak_gain);
  }
  return out;
}

/// Deterministic 64x64 scenes of "cars" (class 0) and "pedestrians"
/// (class 1) with exact labels. `adverse` darkens and adds rain streaks
/// without touching geometry.
inline DomainDataset synth_toy_domain(int n, bool adverse, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("synth_toy_domain: n must be >= 1");
  std::vector<Sample> samples;
  samples.reserve(n);
  for (int i = 0; i < n; ++i) {
    const std::uint64_t scene_seed = seed * 1000003ULL + static_cast<std::uint64_t>(i);
    auto [img, boxes] = detail::toy_scene(scene_seed);
    if (adverse) img = apply_adverse(img, scene_seed);
    char name[32];
    std::snprintf(name, sizeof(name), "toy_%06d", i);
    samples.push_back({name, {}, std::make_shared<const Image>(std::move(img)), std::move(boxes)});
  }
  return DomainDataset("<toy>", adverse ? Domain::target : Domain::source, std::move(samples));
}

}  // namespace sgan
