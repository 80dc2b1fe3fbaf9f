#ifndef TRILEVEL_OPS_HPP
#define TRILEVEL_OPS_HPP

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "trilevel/errors.hpp"
#include "trilevel/mac_counter.hpp"
#include "trilevel/parallel.hpp"
#include "trilevel/tensor.hpp"

namespace trilevel {

/// Boolean [rows x cols] keep-mask stored both densely and as per-row key lists.
class KeyMask {
 public:
  KeyMask() = default;

  static KeyMask from_dense(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> keep) {
    if (keep.size() != rows * cols)
      throw DimensionError("mask length " + std::to_string(keep.size()) + " does not match " +
                           shape_str({rows, cols}));
    KeyMask m;
    m.rows_ = rows;
    m.cols_ = cols;
    m.dense_ = std::move(keep);
    m.offsets_.assign(rows + 1, 0);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j)
        if (m.dense_[i * cols + j]) m.keys_.push_back(static_cast<std::uint32_t>(j));
      m.offsets_[i + 1] = m.keys_.size();
    }
    return m;
  }

  /// `sets[i]` lists the kept columns of row i (any order, duplicates ignored).
  static KeyMask from_sets(std::size_t rows, std::size_t cols, const std::vector<std::vector<std::size_t>>& sets) {
    if (sets.size() != rows) throw DimensionError("mask has " + std::to_string(sets.size()) + " rows, expected " +
                                                  std::to_string(rows));
    std::vector<std::uint8_t> keep(rows * cols, 0);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j : sets[i]) {
        if (j >= cols) throw IndexError("mask column " + std::to_string(j) + " out of range " + std::to_string(cols));
        keep[i * cols + j] = 1;
      }
    return from_dense(rows, cols, std::move(keep));
  }

  static KeyMask full(std::size_t rows, std::size_t cols) {
    return from_dense(rows, cols, std::vector<std::uint8_t>(rows * cols, 1));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool kept(std::size_t i, std::size_t j) const { return dense_[i * cols_ + j] != 0; }
  std::span<const std::uint32_t> keys(std::size_t row) const {
    return std::span<const std::uint32_t>(keys_).subspan(offsets_[row], offsets_[row + 1] - offsets_[row]);
  }
  std::size_t pair_count() const { return keys_.size(); }
  std::span<const std::uint8_t> dense() const { return dense_; }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<std::uint8_t> dense_;
  std::vector<std::size_t> offsets_;
  std::vector<std::uint32_t> keys_;
};

using KeyMaskPtr = std::shared_ptr<const KeyMask>;

namespace ops {

namespace detail {

template <typename T>
void require_matrix(const Tensor<T>& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + " expects a matrix, got " + shape_str(t.shape()));
}

template <typename T>
std::vector<T>* grad_of(TapeNode<T>& self, std::size_t input) {
  auto& in = *self.inputs[input];
  return in.requires_grad ? &in.ensure_grad() : nullptr;
}

// C[MxN] += A[MxK] * B[KxN]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  parallel_for(m, k * n, [&](std::size_t i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  });
}

// C[MxN] += A[MxK] * B[NxK]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  parallel_for(m, k * n, [&](std::size_t i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  });
}

// C[KxN] += A[MxK]^T * B[MxN]; rows of C are independent, so parallelize over K.
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  parallel_for(k, m * n, [&](std::size_t p) {
    T* crow = c + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      T av = a[i * k + p];
      const T* brow = b + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  });
}

}  // namespace detail

/// [M x K] * [K x N] -> [M x N].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<T> out(m * n, T(0));
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  charge_macs(static_cast<std::uint64_t>(m) * n * k);
  return Tensor<T>::from_op(OpKind::matmul, {m, n}, std::move(out), {a, b}, [m, k, n](TapeNode<T>& self) {
    const T* g = self.grad.data();
    if (auto* ga = detail::grad_of(self, 0)) detail::gemm_nt(g, self.inputs[1]->data.data(), ga->data(), m, n, k);
    if (auto* gb = detail::grad_of(self, 1)) detail::gemm_tn(self.inputs[0]->data.data(), g, gb->data(), m, k, n);
  });
}

/// scale * A[M x K] * B[N x K]^T -> [M x N].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b, T scale = T(1)) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k)
    throw DimensionError("matmul_nt inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  std::vector<T> out(m * n, T(0));
  detail::gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  if (scale != T(1))
    for (auto& v : out) v *= scale;
  charge_macs(static_cast<std::uint64_t>(m) * n * k);
  return Tensor<T>::from_op(OpKind::matmul_nt, {m, n}, std::move(out), {a, b}, [m, k, n, scale](TapeNode<T>& self) {
    std::vector<T> g = self.grad;
    if (scale != T(1))
      for (auto& v : g) v *= scale;
    if (auto* ga = detail::grad_of(self, 0)) detail::gemm_nn(g.data(), self.inputs[1]->data.data(), ga->data(), m, n, k);
    if (auto* gb = detail::grad_of(self, 1)) detail::gemm_tn(g.data(), self.inputs[0]->data.data(), gb->data(), m, n, k);
  });
}

/// scale * A * B^T evaluated only at kept (row, col) pairs; other entries are 0.
template <typename T>
Tensor<T> masked_matmul_nt(const Tensor<T>& a, const Tensor<T>& b, KeyMaskPtr mask, T scale = T(1)) {
  detail::require_matrix(a, "masked_matmul_nt");
  detail::require_matrix(b, "masked_matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k)
    throw DimensionError("masked_matmul_nt inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  if (mask->rows() != m || mask->cols() != n)
    throw DimensionError("mask " + shape_str({mask->rows(), mask->cols()}) + " does not cover " + shape_str({m, n}));
  std::vector<T> out(m * n, T(0));
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::uint32_t j : mask->keys(i)) {
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += ad[i * k + p] * bd[j * k + p];
      out[i * n + j] = acc * scale;
    }
  charge_macs(static_cast<std::uint64_t>(mask->pair_count()) * k);
  return Tensor<T>::from_op(OpKind::masked_matmul_nt, {m, n}, std::move(out), {a, b},
                            [m, k, n, scale, mask](TapeNode<T>& self) {
                              const T* ad = self.inputs[0]->data.data();
                              const T* bd = self.inputs[1]->data.data();
                              auto* ga = detail::grad_of(self, 0);
                              auto* gb = detail::grad_of(self, 1);
                              for (std::size_t i = 0; i < m; ++i)
                                for (std::uint32_t j : mask->keys(i)) {
                                  T g = self.grad[i * n + j] * scale;
                                  if (ga)
                                    for (std::size_t p = 0; p < k; ++p) (*ga)[i * k + p] += g * bd[j * k + p];
                                  if (gb)
                                    for (std::size_t p = 0; p < k; ++p) (*gb)[j * k + p] += g * ad[i * k + p];
                                }
                            });
}

/// P[M x N] * V[N x K] reading only the kept entries of P.
template <typename T>
Tensor<T> masked_matmul(const Tensor<T>& p, const Tensor<T>& v, KeyMaskPtr mask) {
  detail::require_matrix(p, "masked_matmul");
  detail::require_matrix(v, "masked_matmul");
  const std::size_t m = p.dim(0), n = p.dim(1), k = v.dim(1);
  if (v.dim(0) != n)
    throw DimensionError("masked_matmul inner dimensions disagree: " + shape_str(p.shape()) + " x " +
                         shape_str(v.shape()));
  if (mask->rows() != m || mask->cols() != n)
    throw DimensionError("mask " + shape_str({mask->rows(), mask->cols()}) + " does not cover " + shape_str({m, n}));
  std::vector<T> out(m * k, T(0));
  const T* pd = p.data().data();
  const T* vd = v.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::uint32_t j : mask->keys(i)) {
      T w = pd[i * n + j];
      for (std::size_t c = 0; c < k; ++c) out[i * k + c] += w * vd[j * k + c];
    }
  charge_macs(static_cast<std::uint64_t>(mask->pair_count()) * k);
  return Tensor<T>::from_op(OpKind::masked_matmul, {m, k}, std::move(out), {p, v}, [m, n, k, mask](TapeNode<T>& self) {
    const T* pd = self.inputs[0]->data.data();
    const T* vd = self.inputs[1]->data.data();
    auto* gp = detail::grad_of(self, 0);
    auto* gv = detail::grad_of(self, 1);
    const T* g = self.grad.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::uint32_t j : mask->keys(i)) {
        if (gp) {
          T acc = T(0);
          for (std::size_t c = 0; c < k; ++c) acc += g[i * k + c] * vd[j * k + c];
          (*gp)[i * n + j] += acc;
        }
        if (gv) {
          T w = pd[i * n + j];
          for (std::size_t c = 0; c < k; ++c) (*gv)[j * k + c] += w * g[i * k + c];
        }
      }
  });
}

/// Row-wise softmax. Masked entries come out exactly 0; each row is normalized over its
/// kept entries after subtracting the kept-entry maximum.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, const KeyMask* mask = nullptr) {
  detail::require_matrix(x, "softmax_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (mask && (mask->rows() != m || mask->cols() != n))
    throw DimensionError("mask " + shape_str({mask->rows(), mask->cols()}) + " does not cover " + shape_str({m, n}));
  std::vector<T> out(m * n, T(0));
  const T* xd = x.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !mask->kept(i, j)) continue;
      any = true;
      mx = std::max(mx, xd[i * n + j]);
    }
    if (!any) throw DegenerateMaskError(i);
    T sum = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !mask->kept(i, j)) continue;
      T e = std::exp(xd[i * n + j] - mx);
      out[i * n + j] = e;
      sum += e;
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= sum;
  }
  std::vector<T> saved = out;
  return Tensor<T>::from_op(OpKind::softmax_rows, {m, n}, std::move(out), {x},
                            [m, n, y = std::move(saved)](TapeNode<T>& self) {
                              auto* gx = detail::grad_of(self, 0);
                              const T* g = self.grad.data();
                              for (std::size_t i = 0; i < m; ++i) {
                                T dot = T(0);
                                for (std::size_t j = 0; j < n; ++j) dot += y[i * n + j] * g[i * n + j];
                                for (std::size_t j = 0; j < n; ++j) (*gx)[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                              }
                            });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, const KeyMaskPtr& mask) {
  return softmax_rows(x, mask.get());
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor<T>::from_op(OpKind::add, a.shape(), std::move(out), {a, b}, [](TapeNode<T>& self) {
    for (std::size_t in = 0; in < 2; ++in)
      if (auto* g = detail::grad_of(self, in))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

/// x[M x N] + bias[N] broadcast over rows.
template <typename T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require_matrix(x, "add_row");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.numel() != n)
    throw DimensionError("add_row bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data()[i * n + j] + bias.data()[j];
  return Tensor<T>::from_op(OpKind::add_row, x.shape(), std::move(out), {x, bias}, [m, n](TapeNode<T>& self) {
    if (auto* gx = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < m * n; ++i) (*gx)[i] += self.grad[i];
    if (auto* gb = detail::grad_of(self, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += self.grad[i * n + j];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * s;
  return Tensor<T>::from_op(OpKind::scale, x.shape(), std::move(out), {x}, [s](TapeNode<T>& self) {
    auto* g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * s;
  });
}

/// GELU, tanh approximation.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    T v = x.data()[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
  }
  return Tensor<T>::from_op(OpKind::gelu, x.shape(), std::move(out), {x}, [](TapeNode<T>& self) {
    auto* g = detail::grad_of(self, 0);
    const auto& xd = self.inputs[0]->data;
    for (std::size_t i = 0; i < g->size(); ++i) {
      T v = xd[i];
      T t = std::tanh(kC * (v + kA * v * v * v));
      T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * kC * (T(1) + T(3) * kA * v * v);
      (*g)[i] += self.grad[i] * d;
    }
  });
}

/// Normalizes over the last axis, then applies gamma * xhat + beta.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (!(eps > T(0))) throw DimensionError("layernorm eps must be positive");
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d)
    throw DimensionError("layernorm affine " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " does not match last axis of " + shape_str(x.shape()));
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel()), xhat(x.numel()), rstd(rows);
  const T* xd = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += xd[r * d + j];
    mean /= T(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      T c = xd[r * d + j] - mean;
      var += c * c;
    }
    var /= T(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xd[r * d + j] - mean) * rstd[r];
      out[r * d + j] = gamma.data()[j] * xhat[r * d + j] + beta.data()[j];
    }
  }
  return Tensor<T>::from_op(OpKind::layernorm, x.shape(), std::move(out), {x, gamma, beta},
                            [rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](TapeNode<T>& self) {
                              const auto& gm = self.inputs[1]->data;
                              const T* g = self.grad.data();
                              if (auto* gg = detail::grad_of(self, 1))
                                for (std::size_t r = 0; r < rows; ++r)
                                  for (std::size_t j = 0; j < d; ++j) (*gg)[j] += g[r * d + j] * xhat[r * d + j];
                              if (auto* gb = detail::grad_of(self, 2))
                                for (std::size_t r = 0; r < rows; ++r)
                                  for (std::size_t j = 0; j < d; ++j) (*gb)[j] += g[r * d + j];
                              if (auto* gx = detail::grad_of(self, 0)) {
                                for (std::size_t r = 0; r < rows; ++r) {
                                  T mean_dy = T(0), mean_dy_xhat = T(0);
                                  for (std::size_t j = 0; j < d; ++j) {
                                    T dy = g[r * d + j] * gm[j];
                                    mean_dy += dy;
                                    mean_dy_xhat += dy * xhat[r * d + j];
                                  }
                                  mean_dy /= T(d);
                                  mean_dy_xhat /= T(d);
                                  for (std::size_t j = 0; j < d; ++j) {
                                    T dy = g[r * d + j] * gm[j];
                                    (*gx)[r * d + j] += rstd[r] * (dy - mean_dy - xhat[r * d + j] * mean_dy_xhat);
                                  }
                                }
                              }
                            });
}

/// Rows of x at `indices`, in that order.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::vector<std::size_t> indices) {
  detail::require_matrix(x, "gather_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(indices.size() * n);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= m)
      throw IndexError("gather_rows index " + std::to_string(indices[r]) + " out of range for " +
                       shape_str(x.shape()));
    std::copy_n(x.data().data() + indices[r] * n, n, out.data() + r * n);
  }
  const std::size_t rows = indices.size();
  return Tensor<T>::from_op(OpKind::gather_rows, {rows, n}, std::move(out), {x},
                            [n, idx = std::move(indices)](TapeNode<T>& self) {
                              auto* g = detail::grad_of(self, 0);
                              for (std::size_t r = 0; r < idx.size(); ++r)
                                for (std::size_t j = 0; j < n; ++j) (*g)[idx[r] * n + j] += self.grad[r * n + j];
                            });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t count) {
  detail::require_matrix(x, "slice_cols");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (start + count > n)
    throw IndexError("slice_cols [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of range for " + shape_str(x.shape()));
  std::vector<T> out(m * count);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(x.data().data() + i * n + start, count, out.data() + i * count);
  return Tensor<T>::from_op(OpKind::slice_cols, {m, count}, std::move(out), {x}, [m, n, start, count](TapeNode<T>& self) {
    auto* g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) (*g)[i * n + start + j] += self.grad[i * count + j];
  });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  const std::size_t m = parts.front().dim(0);
  std::vector<std::size_t> widths;
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_cols");
    if (p.dim(0) != m)
      throw DimensionError("concat_cols row mismatch: " + shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    widths.push_back(p.dim(1));
    n += p.dim(1);
  }
  std::vector<T> out(m * n);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < m; ++i) std::copy_n(p.data().data() + i * w, w, out.data() + i * n + off);
    off += w;
  }
  return Tensor<T>::from_op(OpKind::concat_cols, {m, n}, std::move(out), parts,
                            [m, n, widths = std::move(widths)](TapeNode<T>& self) {
                              std::size_t off = 0;
                              for (std::size_t p = 0; p < widths.size(); ++p) {
                                const std::size_t w = widths[p];
                                if (auto* g = detail::grad_of(self, p))
                                  for (std::size_t i = 0; i < m; ++i)
                                    for (std::size_t j = 0; j < w; ++j) (*g)[i * w + j] += self.grad[i * n + off + j];
                                off += w;
                              }
                            });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  const std::size_t n = parts.front().cols();
  std::vector<std::size_t> sizes;
  std::size_t m = 0;
  for (const auto& p : parts) {
    if (p.cols() != n || p.numel() % n != 0)
      throw DimensionError("concat_rows column mismatch: " + shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    sizes.push_back(p.numel());
    m += p.numel() / n;
  }
  std::vector<T> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return Tensor<T>::from_op(OpKind::concat_rows, {m, n}, std::move(out), parts,
                            [sizes = std::move(sizes)](TapeNode<T>& self) {
                              std::size_t off = 0;
                              for (std::size_t p = 0; p < sizes.size(); ++p) {
                                if (auto* g = detail::grad_of(self, p))
                                  for (std::size_t i = 0; i < sizes[p]; ++i) (*g)[i] += self.grad[off + i];
                                off += sizes[p];
                              }
                            });
}

/// Column means: [M x N] -> [1 x N].
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x) {
  detail::require_matrix(x, "mean_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(n, T(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x.data()[i * n + j];
  for (auto& v : out) v /= T(m);
  return Tensor<T>::from_op(OpKind::mean_rows, {1, n}, std::move(out), {x}, [m, n](TapeNode<T>& self) {
    auto* g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += self.grad[j] / T(m);
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return Tensor<T>::from_op(OpKind::sum, {}, {acc}, {x}, [](TapeNode<T>& self) {
    auto* g = detail::grad_of(self, 0);
    for (auto& v : *g) v += self.grad[0];
  });
}

/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  detail::require_matrix(logits, "cross_entropy");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (labels.size() != b)
    throw DimensionError("cross_entropy got " + std::to_string(labels.size()) + " labels for " +
                         shape_str(logits.shape()));
  std::vector<T> probs(b * c);
  std::vector<int> lab(labels.begin(), labels.end());
  T loss = T(0);
  for (std::size_t i = 0; i < b; ++i) {
    if (lab[i] < 0 || static_cast<std::size_t>(lab[i]) >= c)
      throw IndexError("label " + std::to_string(lab[i]) + " out of range [0, " + std::to_string(c) + ")");
    const T* row = logits.data().data() + i * c;
    T mx = *std::max_element(row, row + c);
    T sum = T(0);
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
    T lse = mx + std::log(sum);
    loss += lse - row[lab[i]];
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - lse);
  }
  loss /= T(b);
  return Tensor<T>::from_op(OpKind::cross_entropy, {}, {loss}, {logits},
                            [b, c, probs = std::move(probs), lab = std::move(lab)](TapeNode<T>& self) {
                              auto* g = detail::grad_of(self, 0);
                              T s = self.grad[0] / T(b);
                              for (std::size_t i = 0; i < b; ++i)
                                for (std::size_t j = 0; j < c; ++j)
                                  (*g)[i * c + j] +=
                                      s * (probs[i * c + j] - (static_cast<int>(j) == lab[i] ? T(1) : T(0)));
                            });
}

}  // namespace ops
}  // namespace trilevel

#endif  // TRILEVEL_OPS_HPP
