#pragma once

// Central finite-difference gradient checks in double precision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "sgan/core/autograd.hpp"
#include "sgan/core/nn.hpp"

namespace sgan::testing {

struct GradCheckOptions {
  double eps = 1e-5;
  double rtol = 1e-3;
  double atol = 1e-8;        // both gradients below this count as agreeing
  int samples_per_tensor = 4;
  std::uint64_t seed = 1;
};

struct GradCheckResult {
  int checked = 0;
  int passed = 0;
  double worst_rel = 0.0;
  std::string worst_name;

  double pass_rate() const { return checked ? static_cast<double>(passed) / checked : 0.0; }
};

inline bool grad_close(double analytic, double numeric, const GradCheckOptions& o, double* rel = nullptr) {
  const double diff = std::abs(analytic - numeric);
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  const double r = scale > 0 ? diff / scale : 0.0;
  if (rel) *rel = r;
  return diff <= o.atol || r <= o.rtol;
}

/// Compares d loss / d p for sampled entries of every tensor in `params`.
/// `loss` must rebuild the graph from the current parameter values.
inline GradCheckResult gradcheck(const nn::ParamList<double>& params,
                                 const std::function<Var<double>()>& loss,
                                 const GradCheckOptions& o = {}) {
  for (auto p : params) p.var.zero_grad();
  backward(loss());
  std::vector<Tensor<double>> analytic;
  for (const auto& p : params) analytic.push_back(p.var.grad());

  std::mt19937_64 rng(o.seed);
  GradCheckResult res;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto var = params[k].var;
    auto& w = var.mutable_value();
    std::uniform_int_distribution<std::size_t> pick(0, w.size() - 1);
    const int n = static_cast<int>(std::min<std::size_t>(o.samples_per_tensor, w.size()));
    for (int s = 0; s < n; ++s) {
      const std::size_t i = pick(rng);
      const double orig = w[i];
      w[i] = orig + o.eps;
      const double lp = loss().item();
      w[i] = orig - o.eps;
      const double lm = loss().item();
      w[i] = orig;
      const double numeric = (lp - lm) / (2 * o.eps);
      double rel = 0;
      ++res.checked;
      if (grad_close(analytic[k][i], numeric, o, &rel)) {
        ++res.passed;
      } else if (rel > res.worst_rel) {
        res.worst_rel = rel;
        res.worst_name = params[k].name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return res;
}

/// Convenience for checking gradients of free input tensors.
inline GradCheckResult gradcheck_inputs(std::vector<Var<double>> inputs,
                                        const std::function<Var<double>()>& loss,
                                        const GradCheckOptions& o = {}) {
  nn::ParamList<double> params;
  for (std::size_t i = 0; i < inputs.size(); ++i) params.push_back({"input" + std::to_string(i), inputs[i]});
  return gradcheck(params, loss, o);
}

}  // namespace sgan::testing
