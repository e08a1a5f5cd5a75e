#pragma once

// Differentiable tensor operations. Activations are NCHW; every op records a
// backward closure only when grad mode is on and some input requires grad.

#include <Eigen/Core>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "sgan/core/autograd.hpp"
#include "sgan/core/tensor.hpp"

namespace sgan::ops {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<MatRM<T>>;
template <class T>
using CMapRM = Eigen::Map<const MatRM<T>>;

template <class T>
Var<T> constant(Tensor<T> t) {
  return Var<T>(std::move(t), false);
}

namespace detail {

inline void require_rank(const Shape& s, std::size_t r, const char* op) {
  if (s.size() != r)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                     shape_str(s));
}

template <class T>
void im2col(const T* src, int C, int H, int W, int k, int s, int p, int Ho, int Wo, T* col) {
  const int plane = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    const T* sc = src + static_cast<std::size_t>(c) * H * W;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        T* row = col + (static_cast<std::size_t>(c) * k * k + ki * k + kj) * plane;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * s - p + ki;
          T* dst = row + oh * Wo;
          if (ih < 0 || ih >= H) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* srow = sc + static_cast<std::size_t>(ih) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * s - p + kj;
            dst[ow] = (iw >= 0 && iw < W) ? srow[iw] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* col, int C, int H, int W, int k, int s, int p, int Ho, int Wo, T* dst) {
  const int plane = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    T* dc = dst + static_cast<std::size_t>(c) * H * W;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const T* row = col + (static_cast<std::size_t>(c) * k * k + ki * k + kj) * plane;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * s - p + ki;
          if (ih < 0 || ih >= H) continue;
          T* drow = dc + static_cast<std::size_t>(ih) * W;
          const T* srow = row + oh * Wo;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * s - p + kj;
            if (iw >= 0 && iw < W) drow[iw] += srow[ow];
          }
        }
      }
    }
  }
}

template <class T, class F, class DF>
Var<T> unary(const Var<T>& x, F f, DF df) {
  Tensor<T> out(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  auto* px = x.node();
  return make_op<T>(out, {x}, [px, out, df](const Tensor<T>& g) {
    auto& gx = px->grad_buffer();
    const auto& xv = px->value;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], out[i]);
  });
}

}  // namespace detail

// ---- elementwise ---------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value(), "add");
  Tensor<T> out = a.value();
  out += b.value();
  auto *pa = a.node(), *pb = b.node();
  return make_op<T>(std::move(out), {a, b}, [pa, pb](const Tensor<T>& g) {
    pa->accumulate(g);
    pb->accumulate(g);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value(), "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  auto *pa = a.node(), *pb = b.node();
  return make_op<T>(std::move(out), {a, b}, [pa, pb](const Tensor<T>& g) {
    pa->accumulate(g);
    if (pb->requires_grad) {
      auto& gb = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  auto *pa = a.node(), *pb = b.node();
  return make_op<T>(std::move(out), {a, b}, [pa, pb](const Tensor<T>& g) {
    if (pa->requires_grad) {
      auto& ga = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto& gb = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa->value[i];
    }
  });
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value(), "div");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] / b.value()[i];
  auto *pa = a.node(), *pb = b.node();
  return make_op<T>(out, {a, b}, [pa, pb, out](const Tensor<T>& g) {
    if (pa->requires_grad) {
      auto& ga = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / pb->value[i];
    }
    if (pb->requires_grad) {
      auto& gb = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * out[i] / pb->value[i];
    }
  });
}

/// Elementwise min; ties route the gradient to `a`.
template <class T>
Var<T> minimum(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value(), "minimum");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(a.value()[i], b.value()[i]);
  auto *pa = a.node(), *pb = b.node();
  return make_op<T>(std::move(out), {a, b}, [pa, pb](const Tensor<T>& g) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      const bool take_a = pa->value[i] <= pb->value[i];
      Node<T>* dst = take_a ? pa : pb;
      if (dst->requires_grad) dst->grad_buffer()[i] += g[i];
    }
  });
}

template <class T>
Var<T> maximum(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value(), "maximum");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.value()[i], b.value()[i]);
  auto *pa = a.node(), *pb = b.node();
  return make_op<T>(std::move(out), {a, b}, [pa, pb](const Tensor<T>& g) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      const bool take_a = pa->value[i] >= pb->value[i];
      Node<T>* dst = take_a ? pa : pb;
      if (dst->requires_grad) dst->grad_buffer()[i] += g[i];
    }
  });
}

template <class T>
Var<T> add_scalar(const Var<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T>
Var<T> mul_scalar(const Var<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Var<T> square(const Var<T>& x) {
  return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope = T(0.2)) {
  return detail::unary(
      x, [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <class T>
Var<T> tanh(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
T sigmoid_scalar(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> atan(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return std::atan(v); }, [](T v, T) { return T(1) / (T(1) + v * v); });
}

// ---- reductions ----------------------------------------------------------

template <class T>
Var<T> sum(const Var<T>& x) {
  T s = T(0);
  for (T v : x.value().vec()) s += v;
  auto* px = x.node();
  return make_op<T>(Tensor<T>::scalar(s), {x}, [px](const Tensor<T>& g) {
    if (!px->requires_grad) return;
    auto& gx = px->grad_buffer();
    const T gv = g[0];
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gv;
  });
}

template <class T>
Var<T> mean(const Var<T>& x) {
  return mul_scalar(sum(x), T(1) / static_cast<T>(x.size()));
}

/// mean |a - b|
template <class T>
Var<T> l1_loss(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value(), "l1_loss");
  const std::size_t n = a.size();
  T s = T(0);
  for (std::size_t i = 0; i < n; ++i) s += std::abs(a.value()[i] - b.value()[i]);
  auto *pa = a.node(), *pb = b.node();
  return make_op<T>(Tensor<T>::scalar(s / static_cast<T>(n)), {a, b},
                    [pa, pb, n](const Tensor<T>& g) {
                      const T scale = g[0] / static_cast<T>(n);
                      for (std::size_t i = 0; i < n; ++i) {
                        const T d = pa->value[i] - pb->value[i];
                        const T sg = d > T(0) ? scale : (d < T(0) ? -scale : T(0));
                        if (pa->requires_grad) pa->grad_buffer()[i] += sg;
                        if (pb->requires_grad) pb->grad_buffer()[i] -= sg;
                      }
                    });
}

/// mean (x - c)^2
template <class T>
Var<T> mse_const(const Var<T>& x, T c) {
  const std::size_t n = x.size();
  T s = T(0);
  for (T v : x.value().vec()) s += (v - c) * (v - c);
  auto* px = x.node();
  return make_op<T>(Tensor<T>::scalar(s / static_cast<T>(n)), {x}, [px, c, n](const Tensor<T>& g) {
    auto& gx = px->grad_buffer();
    const T scale = T(2) * g[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) gx[i] += scale * (px->value[i] - c);
  });
}

/// Sum over elements of binary cross-entropy between sigmoid(logits) and target.
template <class T>
Var<T> bce_with_logits_sum(const Var<T>& logits, const Tensor<T>& target) {
  logits.value().check_same(target, "bce_with_logits");
  T s = T(0);
  const auto& x = logits.value();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x[i];
    s += std::max(v, T(0)) - v * target[i] + std::log1p(std::exp(-std::abs(v)));
  }
  auto* px = logits.node();
  return make_op<T>(Tensor<T>::scalar(s), {logits}, [px, target](const Tensor<T>& g) {
    auto& gx = px->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i)
      gx[i] += g[0] * (sigmoid_scalar(px->value[i]) - target[i]);
  });
}

// ---- shape ---------------------------------------------------------------

template <class T>
Var<T> reshape(const Var<T>& x, Shape s) {
  Tensor<T> out = x.value().reshaped(std::move(s));
  auto* px = x.node();
  return make_op<T>(std::move(out), {x}, [px](const Tensor<T>& g) {
    auto& gx = px->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& s0 = xs[0].shape();
  detail::require_rank(s0, 4, "concat_channels");
  int C = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    detail::require_rank(s, 4, "concat_channels");
    if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
      throw ShapeError("concat_channels: incompatible " + shape_str(s) + " vs " + shape_str(s0));
    C += s[1];
  }
  const int N = s0[0], HW = s0[2] * s0[3];
  Tensor<T> out(Shape{N, C, s0[2], s0[3]});
  std::vector<Node<T>*> nodes;
  std::vector<int> offsets;
  int off = 0;
  for (const auto& x : xs) {
    const int c = x.dim(1);
    for (int n = 0; n < N; ++n)
      std::copy_n(x.value().data() + static_cast<std::size_t>(n) * c * HW,
                  static_cast<std::size_t>(c) * HW,
                  out.data() + (static_cast<std::size_t>(n) * C + off) * HW);
    nodes.push_back(x.node());
    offsets.push_back(off);
    off += c;
  }
  return make_op<T>(std::move(out), xs, [nodes, offsets, N, C, HW](const Tensor<T>& g) {
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      Node<T>* p = nodes[k];
      if (!p->requires_grad) continue;
      auto& gp = p->grad_buffer();
      const int c = p->value.dim(1);
      for (int n = 0; n < N; ++n) {
        const T* src = g.data() + (static_cast<std::size_t>(n) * C + offsets[k]) * HW;
        T* dst = gp.data() + static_cast<std::size_t>(n) * c * HW;
        for (std::size_t i = 0; i < static_cast<std::size_t>(c) * HW; ++i) dst[i] += src[i];
      }
    }
  });
}

/// Channels [c0, c1) of an NCHW tensor.
template <class T>
Var<T> slice_channels(const Var<T>& x, int c0, int c1) {
  detail::require_rank(x.shape(), 4, "slice_channels");
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (c0 < 0 || c1 > C || c0 >= c1) throw ShapeError("slice_channels: bad range");
  const int Cs = c1 - c0;
  Tensor<T> out(Shape{N, Cs, x.dim(2), x.dim(3)});
  for (int n = 0; n < N; ++n)
    std::copy_n(x.value().data() + (static_cast<std::size_t>(n) * C + c0) * HW,
                static_cast<std::size_t>(Cs) * HW,
                out.data() + static_cast<std::size_t>(n) * Cs * HW);
  auto* px = x.node();
  return make_op<T>(std::move(out), {x}, [px, N, C, Cs, c0, HW](const Tensor<T>& g) {
    auto& gx = px->grad_buffer();
    for (int n = 0; n < N; ++n) {
      const T* src = g.data() + static_cast<std::size_t>(n) * Cs * HW;
      T* dst = gx.data() + (static_cast<std::size_t>(n) * C + c0) * HW;
      for (std::size_t i = 0; i < static_cast<std::size_t>(Cs) * HW; ++i) dst[i] += src[i];
    }
  });
}

/// Sample `n` of a batch as a batch of one.
template <class T>
Var<T> select_sample(const Var<T>& x, int n) {
  const Shape& s = x.shape();
  const std::size_t per = x.size() / static_cast<std::size_t>(s[0]);
  Shape os = s;
  os[0] = 1;
  Tensor<T> out(os);
  std::copy_n(x.value().data() + per * n, per, out.data());
  auto* px = x.node();
  return make_op<T>(std::move(out), {x}, [px, per, n](const Tensor<T>& g) {
    T* dst = px->grad_buffer().data() + per * n;
    for (std::size_t i = 0; i < per; ++i) dst[i] += g[i];
  });
}

/// Flat gather; result has shape [indices.size()].
template <class T>
Var<T> gather(const Var<T>& x, std::vector<std::size_t> idx) {
  Tensor<T> out(Shape{static_cast<int>(idx.size())});
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = x.value()[idx[i]];
  auto* px = x.node();
  return make_op<T>(std::move(out), {x}, [px, idx = std::move(idx)](const Tensor<T>& g) {
    auto& gx = px->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += g[i];
  });
}

/// x[N,C,H,W] * m[N,1,H,W], broadcasting m over channels.
template <class T>
Var<T> mul_broadcast_channels(const Var<T>& x, const Var<T>& m) {
  detail::require_rank(x.shape(), 4, "mul_broadcast_channels");
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (m.shape() != Shape{N, 1, x.dim(2), x.dim(3)})
    throw ShapeError("mul_broadcast_channels: mask " + shape_str(m.shape()) + " for " +
                     shape_str(x.shape()));
  Tensor<T> out(x.shape());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < HW; ++i) {
        const std::size_t xi = (static_cast<std::size_t>(n) * C + c) * HW + i;
        out[xi] = x.value()[xi] * m.value()[static_cast<std::size_t>(n) * HW + i];
      }
  auto *px = x.node(), *pm = m.node();
  return make_op<T>(std::move(out), {x, m}, [px, pm, N, C, HW](const Tensor<T>& g) {
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < HW; ++i) {
          const std::size_t xi = (static_cast<std::size_t>(n) * C + c) * HW + i;
          const std::size_t mi = static_cast<std::size_t>(n) * HW + i;
          if (px->requires_grad) px->grad_buffer()[xi] += g[xi] * pm->value[mi];
          if (pm->requires_grad) pm->grad_buffer()[mi] += g[xi] * px->value[xi];
        }
  });
}

// ---- linear algebra ------------------------------------------------------

/// Batched product: a[B,M,K] x b[B,K,P] -> [B,M,P]; with `transpose_b`,
/// b is [B,P,K] and the product is a * b^T.
template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool transpose_b = false) {
  detail::require_rank(a.shape(), 3, "bmm");
  detail::require_rank(b.shape(), 3, "bmm");
  const int B = a.dim(0), M = a.dim(1), K = a.dim(2);
  const int P = transpose_b ? b.dim(1) : b.dim(2);
  const int Kb = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != B || Kb != K)
    throw ShapeError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor<T> out(Shape{B, M, P});
  for (int i = 0; i < B; ++i) {
    CMapRM<T> A(a.value().data() + static_cast<std::size_t>(i) * M * K, M, K);
    MapRM<T> O(out.data() + static_cast<std::size_t>(i) * M * P, M, P);
    if (transpose_b) {
      CMapRM<T> Bm(b.value().data() + static_cast<std::size_t>(i) * P * K, P, K);
      O.noalias() = A * Bm.transpose();
    } else {
      CMapRM<T> Bm(b.value().data() + static_cast<std::size_t>(i) * K * P, K, P);
      O.noalias() = A * Bm;
    }
  }
  auto *pa = a.node(), *pb = b.node();
  return make_op<T>(std::move(out), {a, b}, [pa, pb, B, M, K, P, transpose_b](const Tensor<T>& g) {
    for (int i = 0; i < B; ++i) {
      CMapRM<T> G(g.data() + static_cast<std::size_t>(i) * M * P, M, P);
      if (pa->requires_grad) {
        MapRM<T> GA(pa->grad_buffer().data() + static_cast<std::size_t>(i) * M * K, M, K);
        if (transpose_b) {
          CMapRM<T> Bm(pb->value.data() + static_cast<std::size_t>(i) * P * K, P, K);
          GA.noalias() += G * Bm;
        } else {
          CMapRM<T> Bm(pb->value.data() + static_cast<std::size_t>(i) * K * P, K, P);
          GA.noalias() += G * Bm.transpose();
        }
      }
      if (pb->requires_grad) {
        CMapRM<T> A(pa->value.data() + static_cast<std::size_t>(i) * M * K, M, K);
        if (transpose_b) {
          MapRM<T> GB(pb->grad_buffer().data() + static_cast<std::size_t>(i) * P * K, P, K);
          GB.noalias() += G.transpose() * A;
        } else {
          MapRM<T> GB(pb->grad_buffer().data() + static_cast<std::size_t>(i) * K * P, K, P);
          GB.noalias() += A.transpose() * G;
        }
      }
    }
  });
}

/// Softmax over the last dimension; subtracts the row max first.
template <class T>
Var<T> softmax_lastdim(const Var<T>& x) {
  const int L = x.shape().back();
  const std::size_t rows = x.size() / static_cast<std::size_t>(L);
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.value().data() + r * L;
    T* dst = out.data() + r * L;
    const T mx = *std::max_element(src, src + L);
    T s = T(0);
    for (int j = 0; j < L; ++j) s += (dst[j] = std::exp(src[j] - mx));
    for (int j = 0; j < L; ++j) dst[j] /= s;
  }
  auto* px = x.node();
  return make_op<T>(out, {x}, [px, out, rows, L](const Tensor<T>& g) {
    auto& gx = px->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = out.data() + r * L;
      const T* gr = g.data() + r * L;
      T dot = T(0);
      for (int j = 0; j < L; ++j) dot += gr[j] * y[j];
      for (int j = 0; j < L; ++j) gx[r * L + j] += y[j] * (gr[j] - dot);
    }
  });
}

// ---- convolution ---------------------------------------------------------

inline int conv_out_size(int in, int k, int s, int p) { return (in + 2 * p - k) / s + 1; }

/// x[N,Cin,H,W], w[Cout,Cin,k,k], optional b[Cout]; zero padding.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  detail::require_rank(x.shape(), 4, "conv2d");
  detail::require_rank(w.shape(), 4, "conv2d weight");
  const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != Cin)
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " vs weight " +
                     shape_str(w.shape()));
  const int Ho = conv_out_size(H, k, stride, pad), Wo = conv_out_size(W, k, stride, pad);
  if (Ho < 1 || Wo < 1)
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " too small for kernel " +
                     std::to_string(k));
  const int KK = Cin * k * k, P = Ho * Wo;
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);
  const bool keep = grad_enabled() && (x.requires_grad() || w.requires_grad() ||
                                       (b.defined() && b.requires_grad()));
  auto cols = std::make_shared<std::vector<T>>();
  if (keep && !pointwise) cols->resize(static_cast<std::size_t>(N) * KK * P);
  Buffer<T> scratch(pointwise ? 0 : static_cast<std::size_t>(KK) * P);

  Tensor<T> out(Shape{N, Cout, Ho, Wo});
  CMapRM<T> Wm(w.value().data(), Cout, KK);
  for (int n = 0; n < N; ++n) {
    const T* xn = x.value().data() + static_cast<std::size_t>(n) * Cin * H * W;
    const T* col = xn;
    if (!pointwise) {
      T* dst = keep ? cols->data() + static_cast<std::size_t>(n) * KK * P : scratch.data();
      detail::im2col(xn, Cin, H, W, k, stride, pad, Ho, Wo, dst);
      col = dst;
    }
    MapRM<T> O(out.data() + static_cast<std::size_t>(n) * Cout * P, Cout, P);
    O.noalias() = Wm * CMapRM<T>(col, KK, P);
    if (b.defined())
      for (int c = 0; c < Cout; ++c) O.row(c).array() += b.value()[c];
  }
  auto *px = x.node(), *pw = w.node();
  Node<T>* pb = b.defined() ? b.node() : nullptr;
  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_op<T>(std::move(out), std::move(inputs),
                    [=](const Tensor<T>& g) {
                      CMapRM<T> Wm(pw->value.data(), Cout, KK);
                      Buffer<T> dcol(static_cast<std::size_t>(KK) * P);
                      for (int n = 0; n < N; ++n) {
                        CMapRM<T> G(g.data() + static_cast<std::size_t>(n) * Cout * P, Cout, P);
                        const T* col = pointwise
                                           ? px->value.data() + static_cast<std::size_t>(n) * KK * P
                                           : cols->data() + static_cast<std::size_t>(n) * KK * P;
                        if (pw->requires_grad) {
                          MapRM<T> GW(pw->grad_buffer().data(), Cout, KK);
                          GW.noalias() += G * CMapRM<T>(col, KK, P).transpose();
                        }
                        if (pb && pb->requires_grad) {
                          auto& gb = pb->grad_buffer();
                          for (int c = 0; c < Cout; ++c) gb[c] += G.row(c).sum();
                        }
                        if (px->requires_grad) {
                          T* gx = px->grad_buffer().data() + static_cast<std::size_t>(n) * Cin * H * W;
                          if (pointwise) {
                            MapRM<T>(gx, Cin, P).noalias() += Wm.transpose() * G;
                          } else {
                            MapRM<T>(dcol.data(), KK, P).noalias() = Wm.transpose() * G;
                            detail::col2im(dcol.data(), Cin, H, W, k, stride, pad, Ho, Wo, gx);
                          }
                        }
                      }
                    });
}

/// Transposed convolution; w[Cin,Cout,k,k]. Output side (in-1)*s - 2p + k + out_pad.
template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad,
                        int out_pad) {
  detail::require_rank(x.shape(), 4, "conv_transpose2d");
  const int N = x.dim(0), Cin = x.dim(1), Hi = x.dim(2), Wi = x.dim(3);
  const int Cout = w.dim(1), k = w.dim(2);
  if (w.dim(0) != Cin)
    throw ShapeError("conv_transpose2d: input " + shape_str(x.shape()) + " vs weight " +
                     shape_str(w.shape()));
  const int Ho = (Hi - 1) * stride - 2 * pad + k + out_pad;
  const int Wo = (Wi - 1) * stride - 2 * pad + k + out_pad;
  const int KK = Cout * k * k, P = Hi * Wi;
  Tensor<T> out(Shape{N, Cout, Ho, Wo});
  CMapRM<T> Wm(w.value().data(), Cin, KK);
  Buffer<T> col(static_cast<std::size_t>(KK) * P);
  for (int n = 0; n < N; ++n) {
    CMapRM<T> X(x.value().data() + static_cast<std::size_t>(n) * Cin * P, Cin, P);
    MapRM<T>(col.data(), KK, P).noalias() = Wm.transpose() * X;
    T* on = out.data() + static_cast<std::size_t>(n) * Cout * Ho * Wo;
    detail::col2im(col.data(), Cout, Ho, Wo, k, stride, pad, Hi, Wi, on);
    if (b.defined())
      for (int c = 0; c < Cout; ++c) {
        T* oc = on + static_cast<std::size_t>(c) * Ho * Wo;
        for (int i = 0; i < Ho * Wo; ++i) oc[i] += b.value()[c];
      }
  }
  auto *px = x.node(), *pw = w.node();
  Node<T>* pb = b.defined() ? b.node() : nullptr;
  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_op<T>(std::move(out), std::move(inputs), [=](const Tensor<T>& g) {
    CMapRM<T> Wm(pw->value.data(), Cin, KK);
    Buffer<T> dcol(static_cast<std::size_t>(KK) * P);
    for (int n = 0; n < N; ++n) {
      const T* gn = g.data() + static_cast<std::size_t>(n) * Cout * Ho * Wo;
      detail::im2col(gn, Cout, Ho, Wo, k, stride, pad, Hi, Wi, dcol.data());
      CMapRM<T> D(dcol.data(), KK, P);
      if (px->requires_grad) {
        MapRM<T> GX(px->grad_buffer().data() + static_cast<std::size_t>(n) * Cin * P, Cin, P);
        GX.noalias() += Wm * D;
      }
      if (pw->requires_grad) {
        CMapRM<T> X(px->value.data() + static_cast<std::size_t>(n) * Cin * P, Cin, P);
        MapRM<T> GW(pw->grad_buffer().data(), Cin, KK);
        GW.noalias() += X * D.transpose();
      }
      if (pb && pb->requires_grad) {
        auto& gb = pb->grad_buffer();
        for (int c = 0; c < Cout; ++c) {
          const T* gc = gn + static_cast<std::size_t>(c) * Ho * Wo;
          T s = T(0);
          for (int i = 0; i < Ho * Wo; ++i) s += gc[i];
          gb[c] += s;
        }
      }
    }
  });
}

/// Per-sample, per-channel normalisation without affine parameters.
template <class T>
Var<T> instance_norm(const Var<T>& x, T eps = T(1e-5)) {
  detail::require_rank(x.shape(), 4, "instance_norm");
  const int NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out(x.shape());
  std::vector<T> inv_std(NC);
  for (int i = 0; i < NC; ++i) {
    const T* src = x.value().data() + static_cast<std::size_t>(i) * HW;
    T mu = T(0);
    for (int j = 0; j < HW; ++j) mu += src[j];
    mu /= HW;
    T var = T(0);
    for (int j = 0; j < HW; ++j) var += (src[j] - mu) * (src[j] - mu);
    var /= HW;
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[i] = is;
    T* dst = out.data() + static_cast<std::size_t>(i) * HW;
    for (int j = 0; j < HW; ++j) dst[j] = (src[j] - mu) * is;
  }
  auto* px = x.node();
  return make_op<T>(out, {x}, [px, out, inv_std, NC, HW](const Tensor<T>& g) {
    auto& gx = px->grad_buffer();
    for (int i = 0; i < NC; ++i) {
      const T* gy = g.data() + static_cast<std::size_t>(i) * HW;
      const T* y = out.data() + static_cast<std::size_t>(i) * HW;
      T mg = T(0), mgy = T(0);
      for (int j = 0; j < HW; ++j) {
        mg += gy[j];
        mgy += gy[j] * y[j];
      }
      mg /= HW;
      mgy /= HW;
      T* dst = gx.data() + static_cast<std::size_t>(i) * HW;
      for (int j = 0; j < HW; ++j) dst[j] += inv_std[i] * (gy[j] - mg - y[j] * mgy);
    }
  });
}

// ---- resampling ----------------------------------------------------------

/// Adaptive average pooling with the usual floor/ceil bin edges.
template <class T>
Var<T> adaptive_avg_pool2d(const Var<T>& x, int oh, int ow) {
  detail::require_rank(x.shape(), 4, "adaptive_avg_pool2d");
  const int NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  if (oh < 1 || ow < 1) throw ShapeError("adaptive_avg_pool2d: empty output");
  auto lo = [](int i, int in, int out) { return (i * in) / out; };
  auto hi = [](int i, int in, int out) { return ((i + 1) * in + out - 1) / out; };
  Tensor<T> out(Shape{x.dim(0), x.dim(1), oh, ow});
  for (int c = 0; c < NC; ++c) {
    const T* src = x.value().data() + static_cast<std::size_t>(c) * H * W;
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        const int h0 = lo(i, H, oh), h1 = hi(i, H, oh), w0 = lo(j, W, ow), w1 = hi(j, W, ow);
        T s = T(0);
        for (int h = h0; h < h1; ++h)
          for (int w = w0; w < w1; ++w) s += src[h * W + w];
        out[(static_cast<std::size_t>(c) * oh + i) * ow + j] =
            s / static_cast<T>((h1 - h0) * (w1 - w0));
      }
  }
  auto* px = x.node();
  return make_op<T>(std::move(out), {x}, [=](const Tensor<T>& g) {
    auto& gx = px->grad_buffer();
    for (int c = 0; c < NC; ++c)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          const int h0 = lo(i, H, oh), h1 = hi(i, H, oh), w0 = lo(j, W, ow), w1 = hi(j, W, ow);
          const T v = g[(static_cast<std::size_t>(c) * oh + i) * ow + j] /
                      static_cast<T>((h1 - h0) * (w1 - w0));
          for (int h = h0; h < h1; ++h)
            for (int w = w0; w < w1; ++w) gx[static_cast<std::size_t>(c) * H * W + h * W + w] += v;
        }
  });
}

namespace detail {
struct LinearTap {
  int i0, i1;
  double lambda;
};
// Half-pixel-centre source coordinate (align_corners = false).
inline std::vector<LinearTap> bilinear_taps(int in, int out) {
  std::vector<LinearTap> taps(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(src);
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - i0};
  }
  return taps;
}
}  // namespace detail

template <class T>
Var<T> upsample_bilinear(const Var<T>& x, int oh, int ow) {
  detail::require_rank(x.shape(), 4, "upsample_bilinear");
  const int NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto th = detail::bilinear_taps(H, oh), tw = detail::bilinear_taps(W, ow);
  Tensor<T> out(Shape{x.dim(0), x.dim(1), oh, ow});
  for (int c = 0; c < NC; ++c) {
    const T* src = x.value().data() + static_cast<std::size_t>(c) * H * W;
    T* dst = out.data() + static_cast<std::size_t>(c) * oh * ow;
    for (int i = 0; i < oh; ++i) {
      const T ly = static_cast<T>(th[i].lambda);
      for (int j = 0; j < ow; ++j) {
        const T lx = static_cast<T>(tw[j].lambda);
        const T top = (T(1) - lx) * src[th[i].i0 * W + tw[j].i0] + lx * src[th[i].i0 * W + tw[j].i1];
        const T bot = (T(1) - lx) * src[th[i].i1 * W + tw[j].i0] + lx * src[th[i].i1 * W + tw[j].i1];
        dst[i * ow + j] = (T(1) - ly) * top + ly * bot;
      }
    }
  }
  auto* px = x.node();
  return make_op<T>(std::move(out), {x}, [=](const Tensor<T>& g) {
    auto& gx = px->grad_buffer();
    for (int c = 0; c < NC; ++c) {
      T* dst = gx.data() + static_cast<std::size_t>(c) * H * W;
      const T* gs = g.data() + static_cast<std::size_t>(c) * oh * ow;
      for (int i = 0; i < oh; ++i) {
        const T ly = static_cast<T>(th[i].lambda);
        for (int j = 0; j < ow; ++j) {
          const T lx = static_cast<T>(tw[j].lambda);
          const T v = gs[i * ow + j];
          dst[th[i].i0 * W + tw[j].i0] += (T(1) - ly) * (T(1) - lx) * v;
          dst[th[i].i0 * W + tw[j].i1] += (T(1) - ly) * lx * v;
          dst[th[i].i1 * W + tw[j].i0] += ly * (T(1) - lx) * v;
          dst[th[i].i1 * W + tw[j].i1] += ly * lx * v;
        }
      }
    }
  });
}

}  // namespace sgan::ops
