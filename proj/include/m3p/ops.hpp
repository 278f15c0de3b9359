#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "m3p/rng.hpp"
#include "m3p/tensor.hpp"

namespace m3p {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using CMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MMap = Eigen::Map<RowMat<T>>;

// b broadcasts over a when b's shape equals a trailing block of a's shape.
inline bool trailing_broadcast(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

template <class T>
void check_trailing(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (!trailing_broadcast(a.shape(), b.shape()))
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                     shape_str(a.shape()));
}

template <class T>
bool needs(const std::shared_ptr<Node<T>>& n) {
  return n->requires_grad;
}

inline std::size_t normalize_axis(long axis, std::size_t rank) {
  long r = static_cast<long>(rank);
  if (axis < -r || axis >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range");
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

/// a + b, with b either the same shape or a trailing block of a (bias add).
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_trailing("add", a, b);
  const std::size_t n = a.numel(), m = b.numel();
  std::vector<T> out(n);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] + bd[i % m];
  return make_op<T>("add", a.shape(), std::move(out), {a, b}, [n, m](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i % m] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_trailing("sub", a, b);
  const std::size_t n = a.numel(), m = b.numel();
  std::vector<T> out(n);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] - bd[i % m];
  return make_op<T>("sub", a.shape(), std::move(out), {a, b}, [n, m](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i % m] -= self.grad[i];
    }
  });
}

/// Elementwise product with the same trailing broadcast rule as add().
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_trailing("mul", a, b);
  const std::size_t n = a.numel(), m = b.numel();
  std::vector<T> out(n);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] * bd[i % m];
  return make_op<T>("mul", a.shape(), std::move(out), {a, b}, [n, m](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * pb->data[i % m];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i % m] += self.grad[i] * pa->data[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  return make_op<T>("scale", a.shape(), std::move(out), {a}, [s](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, T s) { return scale(a, s); }

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return make_op<T>("relu", x.shape(), std::move(out), {x}, [](Node<T>& self) {
    auto& p = self.parents[0];
    auto& g = p->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (p->data[i] > T(0)) g[i] += self.grad[i];
  });
}

/// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = T(0.5) * xd[i] * (T(1) + std::erf(xd[i] * inv_sqrt2));
  return make_op<T>("gelu", x.shape(), std::move(out), {x}, [](Node<T>& self) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    auto& p = self.parents[0];
    auto& g = p->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = p->data[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

// --------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return make_op<T>("sum", {1}, {s}, {x}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Mean over axis 1 of [B, L, D] restricted to positions with keep[b*L + l] != 0.
template <class T>
Tensor<T> masked_mean(const Tensor<T>& x, const std::vector<std::uint8_t>& keep) {
  if (x.rank() != 3) throw ShapeError("masked_mean expects [B, L, D], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
  if (keep.size() != B * L) throw ShapeError("masked_mean: mask size mismatch");
  std::vector<T> counts(B, T(0));
  std::vector<T> out(B * D, T(0));
  const auto xd = x.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t l = 0; l < L; ++l) {
      if (!keep[b * L + l]) continue;
      counts[b] += T(1);
      for (std::size_t d = 0; d < D; ++d) out[b * D + d] += xd[(b * L + l) * D + d];
    }
    if (counts[b] == T(0)) throw std::invalid_argument("masked_mean: row with no unmasked position");
    for (std::size_t d = 0; d < D; ++d) out[b * D + d] /= counts[b];
  }
  return make_op<T>("masked_mean", {B, D}, std::move(out), {x},
                    [B, L, D, keep, counts](Node<T>& self) {
                      auto& g = self.parents[0]->ensure_grad();
                      for (std::size_t b = 0; b < B; ++b)
                        for (std::size_t l = 0; l < L; ++l) {
                          if (!keep[b * L + l]) continue;
                          for (std::size_t d = 0; d < D; ++d)
                            g[(b * L + l) * D + d] += self.grad[b * D + d] / counts[b];
                        }
                    });
}

// ------------------------------------------------------------------ shaping

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return make_op<T>("reshape", std::move(shape), x.storage(), {x}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// General axis permutation; out.shape[i] = x.shape[perm[i]].
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw ShapeError("permute: rank mismatch");
  Shape out_shape(r);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
  std::vector<std::size_t> src_stride(r);
  std::vector<bool> used(r, false);
  for (std::size_t i = 0; i < r; ++i) {
    if (perm[i] >= r || used[perm[i]]) throw ShapeError("permute: invalid permutation");
    used[perm[i]] = true;
    out_shape[i] = x.dim(perm[i]);
    src_stride[i] = in_strides[perm[i]];
  }
  const std::size_t n = x.numel();
  // gather index for each output element
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t o = 0; o < n; ++o) {
    src[o] = off;
    for (std::size_t k = r; k-- > 0;) {
      ++idx[k];
      off += src_stride[k];
      if (idx[k] < out_shape[k]) break;
      off -= src_stride[k] * idx[k];
      idx[k] = 0;
    }
  }
  std::vector<T> out(n);
  const auto xd = x.data();
  for (std::size_t o = 0; o < n; ++o) out[o] = xd[src[o]];
  return make_op<T>("permute", std::move(out_shape), std::move(out), {x},
                    [src = std::move(src)](Node<T>& self) {
                      auto& g = self.parents[0]->ensure_grad();
                      for (std::size_t o = 0; o < src.size(); ++o) g[src[o]] += self.grad[o];
                    });
}

/// Swaps the last two axes.
template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose needs rank >= 2");
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
  return permute(x, perm);
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, long axis_in) {
  if (xs.empty()) throw ShapeError("concat of nothing");
  const std::size_t r = xs[0].rank();
  const std::size_t axis = detail::normalize_axis(axis_in, r);
  Shape out_shape = xs[0].shape();
  out_shape[axis] = 0;
  for (const auto& t : xs) {
    if (t.rank() != r) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < r; ++i)
      if (i != axis && t.dim(i) != xs[0].dim(i))
        throw ShapeError("concat: " + shape_str(t.shape()) + " vs " + shape_str(xs[0].shape()));
    out_shape[axis] += t.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= out_shape[i];
  for (std::size_t i = axis + 1; i < r; ++i) inner *= out_shape[i];
  const std::size_t out_row = out_shape[axis] * inner;
  std::vector<T> out(numel_of(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& t : xs) {
    offsets.push_back(off);
    const std::size_t row = t.dim(axis) * inner;
    const auto td = t.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(td.begin() + o * row, row, out.begin() + o * out_row + off);
    off += row;
  }
  return make_op<T>("concat", std::move(out_shape), std::move(out), xs,
                    [outer, out_row, offsets](Node<T>& self) {
                      for (std::size_t k = 0; k < self.parents.size(); ++k) {
                        auto& p = self.parents[k];
                        if (!p->requires_grad) continue;
                        auto& g = p->ensure_grad();
                        const std::size_t row = g.size() / outer;
                        for (std::size_t o = 0; o < outer; ++o)
                          for (std::size_t i = 0; i < row; ++i)
                            g[o * row + i] += self.grad[o * out_row + offsets[k] + i];
                      }
                    });
}

/// Selects slices along axis 0.
template <class T>
Tensor<T> index_rows(const Tensor<T>& x, const std::vector<std::size_t>& rows) {
  if (rows.empty()) throw ShapeError("index_rows: empty selection");
  const std::size_t stride = x.numel() / x.dim(0);
  Shape out_shape = x.shape();
  out_shape[0] = rows.size();
  std::vector<T> out(rows.size() * stride);
  const auto xd = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.dim(0)) throw std::out_of_range("index_rows: row out of range");
    std::copy_n(xd.begin() + rows[i] * stride, stride, out.begin() + i * stride);
  }
  return make_op<T>("index_rows", std::move(out_shape), std::move(out), {x},
                    [rows, stride](Node<T>& self) {
                      auto& g = self.parents[0]->ensure_grad();
                      for (std::size_t i = 0; i < rows.size(); ++i)
                        for (std::size_t j = 0; j < stride; ++j)
                          g[rows[i] * stride + j] += self.grad[i * stride + j];
                    });
}

// ------------------------------------------------------------------- matmul

/// Matrix product over the last two axes.
///   [.., m, k] x [k, n]       -> [.., m, n]   (weight shared across leading axes)
///   [b.., m, k] x [b.., k, n] -> [b.., m, n]  (batched, identical leading axes)
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  using detail::CMap;
  using detail::MMap;
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const std::size_t k = a.dim(a.rank() - 1);
  if (b.dim(b.rank() - 2) != k)
    throw ShapeError("matmul inner dims disagree: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const std::size_t n = b.dim(b.rank() - 1);
  if (b.rank() == 2) {
    const std::size_t M = a.numel() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<T> out(M * n);
    MMap<T>(out.data(), M, n).noalias() = CMap<T>(a.data().data(), M, k) * CMap<T>(b.data().data(), k, n);
    return make_op<T>("matmul", std::move(out_shape), std::move(out), {a, b},
                      [M, k, n](Node<T>& self) {
                        auto& pa = self.parents[0];
                        auto& pb = self.parents[1];
                        CMap<T> G(self.grad.data(), M, n);
                        if (pa->requires_grad)
                          MMap<T>(pa->ensure_grad().data(), M, k).noalias() +=
                              G * CMap<T>(pb->data.data(), k, n).transpose();
                        if (pb->requires_grad)
                          MMap<T>(pb->ensure_grad().data(), k, n).noalias() +=
                              CMap<T>(pa->data.data(), M, k).transpose() * G;
                      });
  }
  if (a.rank() != b.rank() ||
      !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
    throw ShapeError("batched matmul leading dims disagree: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const std::size_t m = a.dim(a.rank() - 2);
  const std::size_t batch = a.numel() / (m * k);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i)
    MMap<T>(out.data() + i * m * n, m, n).noalias() =
        CMap<T>(a.data().data() + i * m * k, m, k) * CMap<T>(b.data().data() + i * k * n, k, n);
  return make_op<T>("bmm", std::move(out_shape), std::move(out), {a, b},
                    [batch, m, k, n](Node<T>& self) {
                      auto& pa = self.parents[0];
                      auto& pb = self.parents[1];
                      T* ga = pa->requires_grad ? pa->ensure_grad().data() : nullptr;
                      T* gb = pb->requires_grad ? pb->ensure_grad().data() : nullptr;
                      for (std::size_t i = 0; i < batch; ++i) {
                        CMap<T> G(self.grad.data() + i * m * n, m, n);
                        if (ga)
                          MMap<T>(ga + i * m * k, m, k).noalias() +=
                              G * CMap<T>(pb->data.data() + i * k * n, k, n).transpose();
                        if (gb)
                          MMap<T>(gb + i * k * n, k, n).noalias() +=
                              CMap<T>(pa->data.data() + i * m * k, m, k).transpose() * G;
                      }
                    });
}

// ------------------------------------------------------------ normalisation

/// Softmax along `axis`, stabilised by subtracting the slice maximum.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, long axis_in = -1) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.rank());
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis);
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xd[base + j * inner]);
      T s = 0;
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(xd[base + j * inner] - mx);
        out[base + j * inner] = e;
        s += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= s;
    }
  return make_op<T>("softmax", x.shape(), std::move(out), {x},
                    [outer, inner, len](Node<T>& self) {
                      auto& g = self.parents[0]->ensure_grad();
                      const auto& y = self.data;
                      for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t in = 0; in < inner; ++in) {
                          const std::size_t base = o * len * inner + in;
                          T dot = 0;
                          for (std::size_t j = 0; j < len; ++j)
                            dot += self.grad[base + j * inner] * y[base + j * inner];
                          for (std::size_t j = 0; j < len; ++j) {
                            const std::size_t i = base + j * inner;
                            g[i] += y[i] * (self.grad[i] - dot);
                          }
                        }
                    });
}

/// Layer normalisation over the last axis with affine gamma/beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  const std::size_t D = x.dim(x.rank() - 1);
  if (gamma.numel() != D || beta.numel() != D)
    throw ShapeError("layer_norm: gamma/beta must match last dim " + std::to_string(D));
  const std::size_t rows = x.numel() / D;
  std::vector<T> out(x.numel()), xhat(x.numel()), rstd(rows);
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * D;
    T mu = 0;
    for (std::size_t d = 0; d < D; ++d) mu += row[d];
    mu /= static_cast<T>(D);
    T var = 0;
    for (std::size_t d = 0; d < D; ++d) var += (row[d] - mu) * (row[d] - mu);
    var /= static_cast<T>(D);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t d = 0; d < D; ++d) {
      const T h = (row[d] - mu) * rs;
      xhat[r * D + d] = h;
      out[r * D + d] = h * gd[d] + bd[d];
    }
  }
  return make_op<T>(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [rows, D, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        const auto& gam = pg->data;
        if (pg->requires_grad || pb->requires_grad) {
          auto* gg = pg->requires_grad ? pg->ensure_grad().data() : nullptr;
          auto* gb = pb->requires_grad ? pb->ensure_grad().data() : nullptr;
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t d = 0; d < D; ++d) {
              const T gy = self.grad[r * D + d];
              if (gg) gg[d] += gy * xhat[r * D + d];
              if (gb) gb[d] += gy;
            }
        }
        if (px->requires_grad) {
          auto& gx = px->ensure_grad();
          const T invD = T(1) / static_cast<T>(D);
          for (std::size_t r = 0; r < rows; ++r) {
            T m1 = 0, m2 = 0;
            for (std::size_t d = 0; d < D; ++d) {
              const T dh = self.grad[r * D + d] * gam[d];
              m1 += dh;
              m2 += dh * xhat[r * D + d];
            }
            m1 *= invD;
            m2 *= invD;
            for (std::size_t d = 0; d < D; ++d) {
              const T dh = self.grad[r * D + d] * gam[d];
              gx[r * D + d] += rstd[r] * (dh - m1 - xhat[r * D + d] * m2);
            }
          }
        }
      });
}

/// Rows along the last axis scaled to unit Euclidean norm.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps = T(1e-12)) {
  const std::size_t D = x.dim(x.rank() - 1);
  const std::size_t rows = x.numel() / D;
  std::vector<T> out(x.numel()), norms(rows);
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::size_t d = 0; d < D; ++d) s += xd[r * D + d] * xd[r * D + d];
    norms[r] = std::max(std::sqrt(s), eps);
    for (std::size_t d = 0; d < D; ++d) out[r * D + d] = xd[r * D + d] / norms[r];
  }
  return make_op<T>("l2_normalize", x.shape(), std::move(out), {x},
                    [rows, D, norms = std::move(norms)](Node<T>& self) {
                      auto& g = self.parents[0]->ensure_grad();
                      const auto& y = self.data;
                      for (std::size_t r = 0; r < rows; ++r) {
                        T dot = 0;
                        for (std::size_t d = 0; d < D; ++d) dot += self.grad[r * D + d] * y[r * D + d];
                        for (std::size_t d = 0; d < D; ++d)
                          g[r * D + d] += (self.grad[r * D + d] - y[r * D + d] * dot) / norms[r];
                      }
                    });
}

// ----------------------------------------------------------------- lookups

/// Rows of `table` [V, D] gathered by `ids`; result shape is id_shape + [D].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::int32_t>& ids, Shape id_shape) {
  if (table.rank() != 2) throw ShapeError("embedding table must be [V, D]");
  if (numel_of(id_shape) != ids.size()) throw ShapeError("embedding: id shape mismatch");
  const std::size_t V = table.dim(0), D = table.dim(1);
  std::vector<T> out(ids.size() * D);
  const auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V)
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside vocab of " +
                              std::to_string(V));
    std::copy_n(td.begin() + ids[i] * D, D, out.begin() + i * D);
  }
  Shape out_shape = std::move(id_shape);
  out_shape.push_back(D);
  return make_op<T>("embedding", std::move(out_shape), std::move(out), {table},
                    [ids, D](Node<T>& self) {
                      auto& g = self.parents[0]->ensure_grad();
                      for (std::size_t i = 0; i < ids.size(); ++i)
                        for (std::size_t d = 0; d < D; ++d)
                          g[static_cast<std::size_t>(ids[i]) * D + d] += self.grad[i * D + d];
                    });
}

/// Inverted dropout; identity when not training or p == 0.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, CounterRng& rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout probability must be < 1");
  const T keep_scale = T(1) / static_cast<T>(1.0 - p);
  std::vector<T> mask(x.numel());
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = rng.uniform() < p ? T(0) : keep_scale;
    out[i] = xd[i] * mask[i];
  }
  return make_op<T>("dropout", x.shape(), std::move(out), {x},
                    [mask = std::move(mask)](Node<T>& self) {
                      auto& g = self.parents[0]->ensure_grad();
                      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
                    });
}

// ---------------------------------------------------------------- attention

/// Attention logits [B, H, Tq, Tk] with disallowed keys pushed to a large
/// negative value: keys where key_valid[b*Tk + k] == 0, and k > q when causal.
template <class T>
Tensor<T> mask_attention(const Tensor<T>& scores, const std::vector<std::uint8_t>& key_valid,
                         bool causal) {
  if (scores.rank() != 4) throw ShapeError("mask_attention expects [B, H, Tq, Tk]");
  const std::size_t B = scores.dim(0), H = scores.dim(1), Tq = scores.dim(2), Tk = scores.dim(3);
  if (!key_valid.empty() && key_valid.size() != B * Tk)
    throw ShapeError("mask_attention: key mask size mismatch");
  constexpr T kMasked = T(-1e9);
  std::vector<std::uint8_t> allowed(scores.numel());
  std::vector<T> out(scores.numel());
  const auto sd = scores.data();
  std::size_t i = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t q = 0; q < Tq; ++q)
        for (std::size_t k = 0; k < Tk; ++k, ++i) {
          const bool ok = (key_valid.empty() || key_valid[b * Tk + k]) && !(causal && k > q);
          allowed[i] = ok;
          out[i] = ok ? sd[i] : kMasked;
        }
  return make_op<T>("mask_attention", scores.shape(), std::move(out), {scores},
                    [allowed = std::move(allowed)](Node<T>& self) {
                      auto& g = self.parents[0]->ensure_grad();
                      for (std::size_t j = 0; j < g.size(); ++j)
                        if (allowed[j]) g[j] += self.grad[j];
                    });
}

// ------------------------------------------------------------------- losses

/// Label-smoothed cross-entropy averaged over non-pad positions. The target
/// distribution is (1 - s) * onehot + s / |V|. All-pad targets give 0.
template <class T>
Tensor<T> cross_entropy_label_smoothed(const Tensor<T>& logits,
                                       const std::vector<std::int32_t>& targets, double smoothing,
                                       std::int32_t pad_id) {
  const std::size_t V = logits.dim(logits.rank() - 1);
  const std::size_t N = logits.numel() / V;
  if (targets.size() != N)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(N) + " rows");
  if (smoothing < 0.0 || smoothing > 1.0) throw std::invalid_argument("smoothing outside [0, 1]");
  const T s = static_cast<T>(smoothing);
  const T on = T(1) - s;
  const T off = s / static_cast<T>(V);
  std::size_t valid = 0;
  for (auto t : targets) {
    if (t == pad_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= V)
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside vocab");
    ++valid;
  }
  std::vector<T> probs(logits.numel(), T(0));
  T total = 0;
  const auto ld = logits.data();
  for (std::size_t r = 0; r < N; ++r) {
    if (targets[r] == pad_id) continue;
    const T* row = ld.data() + r * V;
    T mx = *std::max_element(row, row + V);
    T z = 0;
    for (std::size_t v = 0; v < V; ++v) z += std::exp(row[v] - mx);
    const T lse = mx + std::log(z);
    T sum_logp = 0;
    for (std::size_t v = 0; v < V; ++v) {
      sum_logp += row[v] - lse;
      probs[r * V + v] = std::exp(row[v] - lse);
    }
    total += -on * (row[targets[r]] - lse) - off * sum_logp;
  }
  const T loss = valid ? total / static_cast<T>(valid) : T(0);
  return make_op<T>("cross_entropy", {1}, {loss}, {logits},
                    [N, V, valid, on, off, targets, pad_id,
                     probs = std::move(probs)](Node<T>& self) {
                      if (!valid) return;
                      auto& g = self.parents[0]->ensure_grad();
                      const T scale = self.grad[0] / static_cast<T>(valid);
                      for (std::size_t r = 0; r < N; ++r) {
                        if (targets[r] == pad_id) continue;
                        for (std::size_t v = 0; v < V; ++v) {
                          T q = off + (static_cast<std::int32_t>(v) == targets[r] ? on : T(0));
                          g[r * V + v] += scale * (probs[r * V + v] - q);
                        }
                      }
                    });
}

}  // namespace m3p
