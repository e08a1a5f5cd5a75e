#pragma once

// Distribution distances between embedding sets (FID, KID), a small
// random-projection embedding for CPU use, and Pareto selection over
// (FID, mAP) candidates.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "sgan/core/fraction.hpp"
#include "sgan/data.hpp"

namespace sgan {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Rows are embeddings; `extractor` identifies the embedding that produced them.
struct FeatureSet {
  std::string extractor;
  Eigen::MatrixXd data;  // [N, D]

  Eigen::Index n() const { return data.rows(); }
  Eigen::Index dim() const { return data.cols(); }
};

inline void check_comparable(const FeatureSet& a, const FeatureSet& b) {
  if (a.extractor != b.extractor)
    throw MetricError("feature extractor mismatch: '" + a.extractor + "' vs '" + b.extractor + "'");
  if (a.dim() != b.dim())
    throw MetricError("feature dimension mismatch: " + std::to_string(a.dim()) + " vs " +
                      std::to_string(b.dim()));
  if (!a.data.allFinite() || !b.data.allFinite()) throw MetricError("non-finite features");
}

// ---- FID -----------------------------------------------------------------------

inline constexpr double kEigenClip = -1e-8;

namespace detail {
inline Eigen::MatrixXd covariance(const Eigen::MatrixXd& x, const Eigen::VectorXd& mean) {
  const Eigen::MatrixXd c = x.rowwise() - mean.transpose();
  Eigen::MatrixXd cov = (c.adjoint() * c) / static_cast<double>(x.rows() - 1);
  return 0.5 * (cov + cov.transpose());
}

// Eigenvalues of a symmetric matrix with tiny negatives clipped to zero;
// anything below the clip threshold (relative to the spectrum) is an error.
inline Eigen::VectorXd clipped_eigenvalues(const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>& es,
                                           const char* what) {
  if (es.info() != Eigen::Success) throw MetricError(std::string(what) + ": eigensolver failed");
  Eigen::VectorXd ev = es.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < kEigenClip * scale)
      throw MetricError(std::string(what) + " is not positive semi-definite (eigenvalue " +
                        std::to_string(ev[i]) + ")");
    ev[i] = std::max(ev[i], 0.0);
  }
  return ev;
}

inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  const Eigen::VectorXd ev = clipped_eigenvalues(es, "covariance");
  return es.eigenvectors() * ev.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}
}  // namespace detail

/// Frechet distance between Gaussian fits. Tr((Sa Sb)^1/2) is evaluated as
/// Tr((Sa^1/2 Sb Sa^1/2)^1/2), which keeps every step symmetric.
inline double fid(const FeatureSet& a, const FeatureSet& b) {
  check_comparable(a, b);
  if (a.n() < 2 || b.n() < 2) throw MetricError("FID needs at least 2 samples per set");
  const Eigen::VectorXd ma = a.data.colwise().mean(), mb = b.data.colwise().mean();
  const Eigen::MatrixXd sa = detail::covariance(a.data, ma), sb = detail::covariance(b.data, mb);
  const Eigen::MatrixXd ra = detail::psd_sqrt(sa);
  Eigen::MatrixXd inner = ra * sb * ra;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
  const double tr_sqrt = detail::clipped_eigenvalues(es, "covariance product").cwiseSqrt().sum();
  const double d = (ma - mb).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
  return std::max(d, 0.0);
}

// ---- KID -----------------------------------------------------------------------

struct KidResult {
  double mean = 0.0;
  double stddev = 0.0;
};

/// Unbiased MMD^2 with k(x,y) = (x.y/D + 1)^3. Within-set sums exclude the
/// diagonal; the cross term averages over all pairs.
inline double mmd2_unbiased(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  const double m = static_cast<double>(x.rows()), n = static_cast<double>(y.rows());
  if (x.rows() < 2 || y.rows() < 2) throw MetricError("KID subsets need at least 2 samples");
  const double inv_d = 1.0 / static_cast<double>(x.cols());
  auto kernel = [&](const Eigen::MatrixXd& p, const Eigen::MatrixXd& q) -> Eigen::MatrixXd {
    Eigen::ArrayXXd g = (p * q.transpose()).array() * inv_d + 1.0;
    return g.cube().matrix();
  };
  const Eigen::MatrixXd kxx = kernel(x, x), kyy = kernel(y, y), kxy = kernel(x, y);
  const double sxx = (kxx.sum() - kxx.trace()) / (m * (m - 1));
  const double syy = (kyy.sum() - kyy.trace()) / (n * (n - 1));
  const double sxy = kxy.sum() / (m * n);
  return sxx + syy - 2.0 * sxy;
}

inline std::vector<Eigen::Index> sample_subset(Eigen::Index n, Eigen::Index k, std::mt19937_64& rng) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  for (Eigen::Index i = 0; i < k; ++i) {
    std::uniform_int_distribution<Eigen::Index> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Mean and sample standard deviation of the unbiased MMD^2 over random
/// subsets drawn without replacement.
inline KidResult kid(const FeatureSet& a, const FeatureSet& b, int subset_size = 100,
                     int n_subsets = 100, std::uint64_t seed = 0) {
  check_comparable(a, b);
  if (subset_size < 2) throw MetricError("KID subset size must be >= 2");
  if (n_subsets < 1) throw MetricError("KID needs at least one subset");
  if (subset_size > a.n() || subset_size > b.n())
    throw MetricError("KID subset size " + std::to_string(subset_size) + " exceeds set sizes " +
                      std::to_string(a.n()) + "/" + std::to_string(b.n()));
  std::mt19937_64 rng(seed);
  std::vector<double> vals;
  vals.reserve(static_cast<std::size_t>(n_subsets));
  for (int s = 0; s < n_subsets; ++s) {
    const auto ia = sample_subset(a.n(), subset_size, rng);
    const auto ib = sample_subset(b.n(), subset_size, rng);
    vals.push_back(mmd2_unbiased(a.data(ia, Eigen::all), b.data(ib, Eigen::all)));
  }
  KidResult r;
  r.mean = std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
  if (vals.size() > 1) {
    double ss = 0;
    for (double v : vals) ss += (v - r.mean) * (v - r.mean);
    r.stddev = std::sqrt(ss / static_cast<double>(vals.size() - 1));
  }
  return r;
}

// ---- Pareto front ----------------------------------------------------------------

struct ScaleCandidate {
  Fraction scale;
  double fid = 0.0;
  double map = 0.0;
};

/// `a` dominates `b` when it is no worse on both objectives and strictly
/// better on one (lower FID, higher mAP).
inline bool dominates(const ScaleCandidate& a, const ScaleCandidate& b) {
  return a.fid <= b.fid && a.map >= b.map && (a.fid < b.fid || a.map > b.map);
}

/// Non-dominated candidates, ordered by ascending scale. A sweep in order of
/// increasing FID keeps a candidate only if it raises the best mAP seen so
/// far (exact duplicates of a kept candidate are kept too).
inline std::vector<ScaleCandidate> pareto_front(const std::vector<ScaleCandidate>& candidates) {
  if (candidates.empty()) throw MetricError("pareto_front: no candidates");
  for (const auto& c : candidates)
    if (!(c.fid >= 0) || !(c.map >= 0 && c.map <= 1))
      throw MetricError("candidate " + c.scale.str() + " has fid < 0 or map outside [0,1]");
  std::vector<ScaleCandidate> sorted = candidates;
  std::stable_sort(sorted.begin(), sorted.end(), [](const ScaleCandidate& x, const ScaleCandidate& y) {
    return x.fid < y.fid || (x.fid == y.fid && x.map > y.map);
  });
  std::vector<ScaleCandidate> front;
  for (const auto& c : sorted) {
    if (front.empty() || c.map > front.back().map ||
        (c.fid == front.back().fid && c.map == front.back().map))
      front.push_back(c);
  }
  std::stable_sort(front.begin(), front.end(),
                   [](const ScaleCandidate& x, const ScaleCandidate& y) { return x.scale < y.scale; });
  return front;
}

// ---- feature extraction --------------------------------------------------------

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string id() const = 0;
  virtual int dim() const = 0;
  virtual Eigen::VectorXd embed(const Image& img) const = 0;

  FeatureSet extract(const std::vector<Image>& images) const {
    FeatureSet fs{id(), Eigen::MatrixXd(static_cast<Eigen::Index>(images.size()), dim())};
    for (std::size_t i = 0; i < images.size(); ++i)
      fs.data.row(static_cast<Eigen::Index>(i)) = embed(images[i]).transpose();
    return fs;
  }
};

/// Area-pools the image to grid x grid per channel, then applies a fixed
/// Gaussian projection and tanh. Cheap enough for CPU tests; not comparable
/// with inception-based numbers.
class RandomProjectionExtractor : public FeatureExtractor {
 public:
  explicit RandomProjectionExtractor(int out_dim = 64, int grid = 16, std::uint64_t seed = 20240607)
      : out_dim_(out_dim), grid_(grid), seed_(seed) {
    if (out_dim < 1 || grid < 1) throw MetricError("extractor dimensions must be positive");
    const int in = 3 * grid * grid;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
    proj_.resize(out_dim, in);
    for (Eigen::Index i = 0; i < proj_.size(); ++i) proj_.data()[i] = nd(rng);
  }

  std::string id() const override {
    return "randproj-v1-d" + std::to_string(out_dim_) + "-g" + std::to_string(grid_) + "-s" +
           std::to_string(seed_);
  }
  int dim() const override { return out_dim_; }

  Eigen::VectorXd embed(const Image& img) const override {
    const int g = grid_;
    Eigen::VectorXd v(3 * g * g);
    for (int c = 0; c < 3; ++c)
      for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx) {
          const int y0 = gy * img.height / g, y1 = std::max(y0 + 1, (gy + 1) * img.height / g);
          const int x0 = gx * img.width / g, x1 = std::max(x0 + 1, (gx + 1) * img.width / g);
          double s = 0;
          for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) s += img.at(x, y, c);
          v[(c * g + gy) * g + gx] = s / ((y1 - y0) * (x1 - x0)) / 127.5 - 1.0;
        }
    return (proj_ * v).array().tanh().matrix() * 4.0;
  }

 private:
  int out_dim_, grid_;
  std::uint64_t seed_;
  Eigen::MatrixXd proj_;
};

// ---- feature cache files ---------------------------------------------------------
//
// "SGANFEAT", u32 version, u32 id length, id bytes, u64 rows, u64 cols,
// row-major float64 payload.

inline void save_feature_set(const std::string& path, const FeatureSet& fs) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write feature file " + path);
  os.write("SGANFEAT", 8);
  const std::uint32_t version = 1, len = static_cast<std::uint32_t>(fs.extractor.size());
  const std::uint64_t rows = static_cast<std::uint64_t>(fs.n()), cols = static_cast<std::uint64_t>(fs.dim());
  os.write(reinterpret_cast<const char*>(&version), 4);
  os.write(reinterpret_cast<const char*>(&len), 4);
  os.write(fs.extractor.data(), len);
  os.write(reinterpret_cast<const char*>(&rows), 8);
  os.write(reinterpret_cast<const char*>(&cols), 8);
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = fs.data;
  os.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(rm.size() * 8));
  if (!os) throw std::runtime_error("failed writing feature file " + path);
}

inline FeatureSet load_feature_set(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read feature file " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != "SGANFEAT") throw std::runtime_error(path + ": not a feature file");
  std::uint32_t version = 0, len = 0;
  is.read(reinterpret_cast<char*>(&version), 4);
  is.read(reinterpret_cast<char*>(&len), 4);
  if (version != 1) throw std::runtime_error(path + ": unsupported feature file version");
  FeatureSet fs;
  fs.extractor.resize(len);
  is.read(fs.extractor.data(), len);
  std::uint64_t rows = 0, cols = 0;
  is.read(reinterpret_cast<char*>(&rows), 8);
  is.read(reinterpret_cast<char*>(&cols), 8);
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
  is.read(reinterpret_cast<char*>(rm.data()), static_cast<std::streamsize>(rm.size() * 8));
  if (!is) throw std::runtime_error(path + ": truncated feature file");
  fs.data = rm;
  return fs;
}

}  // namespace sgan
