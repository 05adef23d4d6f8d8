#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "latfuse/errors.hpp"
#include "latfuse/flops.hpp"
#include "latfuse/random.hpp"

namespace latfuse {

/// Dense row-major tensor over float or double. Values are contiguous and the
/// object is treated as immutable once an op has produced it.
template <typename S>
struct Tensor {
  static_assert(std::is_floating_point_v<S>, "Tensor requires a real scalar type");

  std::vector<std::size_t> shape;
  std::vector<S> data;
  bool requires_grad = false;

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape_in, S fill = S(0))
      : shape(std::move(shape_in)), data(checked_numel(shape), fill) {}

  Tensor(std::vector<std::size_t> shape_in, std::vector<S> values)
      : shape(std::move(shape_in)), data(std::move(values)) {
    if (checked_numel(shape) != data.size())
      throw ShapeError("tensor: " + std::to_string(data.size()) +
                       " values do not fill shape " + shape_string());
  }

  static Tensor zeros(std::vector<std::size_t> shape_in) { return Tensor(std::move(shape_in)); }

  static Tensor full(std::vector<std::size_t> shape_in, S v) {
    return Tensor(std::move(shape_in), v);
  }

  static Tensor scalar(S v) { return Tensor({1}, std::vector<S>{v}); }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data[i * n + i] = S(1);
    return t;
  }

  static Tensor uniform(std::vector<std::size_t> shape_in, Rng& rng, S lo, S hi) {
    Tensor t(std::move(shape_in));
    for (auto& v : t.data) v = static_cast<S>(rng.uniform(lo, hi));
    return t;
  }

  std::size_t numel() const { return data.size(); }
  std::size_t ndim() const { return shape.size(); }

  std::size_t rows() const {
    require_ndim(2);
    return shape[0];
  }
  std::size_t cols() const {
    require_ndim(2);
    return shape[1];
  }

  S& at(std::size_t i) { return data[i]; }
  S at(std::size_t i) const { return data[i]; }

  S& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  S at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  S& at(std::size_t i, std::size_t j, std::size_t k) {
    return data[(i * shape[1] + j) * shape[2] + k];
  }
  S at(std::size_t i, std::size_t j, std::size_t k) const {
    return data[(i * shape[1] + j) * shape[2] + k];
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_string() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
  }

  void require_ndim(std::size_t n) const {
    if (shape.size() != n)
      throw ShapeError("tensor: expected " + std::to_string(n) + "-d, got " + shape_string());
  }

 private:
  static std::size_t checked_numel(const std::vector<std::size_t>& s) {
    if (s.empty()) throw ShapeError("tensor: rank-0 shapes are not supported");
    std::size_t n = 1;
    for (std::size_t d : s) {
      if (d == 0) throw ShapeError("tensor: zero-sized dimension");
      n *= d;
    }
    return n;
  }
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

namespace detail {

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
}

// Blocked i-k-j product kernel; the j loop runs over contiguous memory and
// vectorizes, the row block keeps B sweeps out of DRAM.
template <typename S>
void matmul_kernel(const S* a, const S* b, S* c, std::size_t m_rows, std::size_t k_dim,
                   std::size_t p_cols) {
  constexpr std::size_t kRowBlock = 8;
  for (std::size_t m0 = 0; m0 < m_rows; m0 += kRowBlock) {
    const std::size_t m1 = std::min(m0 + kRowBlock, m_rows);
    for (std::size_t m = m0; m < m1; ++m) std::fill_n(c + m * p_cols, p_cols, S(0));
    for (std::size_t k = 0; k < k_dim; ++k) {
      const S* brow = b + k * p_cols;
      for (std::size_t m = m0; m < m1; ++m) {
        const S av = a[m * k_dim + k];
        S* crow = c + m * p_cols;
        for (std::size_t p = 0; p < p_cols; ++p) crow[p] += av * brow[p];
      }
    }
  }
  flops::add(2ull * m_rows * k_dim * p_cols);
}

}  // namespace detail

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  a.require_ndim(2);
  b.require_ndim(2);
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions differ, " + a.shape_string() + " vs " +
                     b.shape_string());
  Tensor<S> out({a.rows(), b.cols()});
  detail::matmul_kernel(a.data.data(), b.data.data(), out.data.data(), a.rows(), a.cols(),
                        b.cols());
  return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  a.require_ndim(2);
  Tensor<S> out({a.cols(), a.rows()});
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out.at(c, r) = a.at(r, c);
  return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<S> out(a.shape);
  for (std::size_t i = 0; i < a.numel(); ++i) out.data[i] = a.data[i] + b.data[i];
  flops::add(a.numel());
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<S> out(a.shape);
  for (std::size_t i = 0; i < a.numel(); ++i) out.data[i] = a.data[i] * b.data[i];
  flops::add(a.numel());
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S s) {
  Tensor<S> out(a.shape);
  for (std::size_t i = 0; i < a.numel(); ++i) out.data[i] = a.data[i] * s;
  flops::add(a.numel());
  return out;
}

// x: N x C plus a length-C bias broadcast over rows. The only broadcast the
// op set supports.
template <typename S>
Tensor<S> add_bias_rows(const Tensor<S>& x, const Tensor<S>& b) {
  x.require_ndim(2);
  if (b.ndim() != 1 || b.shape[0] != x.cols())
    throw ShapeError("add_bias_rows: bias " + b.shape_string() + " does not match " +
                     x.shape_string());
  Tensor<S> out(x.shape);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out.at(r, c) = x.at(r, c) + b.data[c];
  flops::add(x.numel());
  return out;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  Tensor<S> out(a.shape);
  for (std::size_t i = 0; i < a.numel(); ++i) out.data[i] = S(1) / (S(1) + std::exp(-a.data[i]));
  flops::add(a.numel());
  return out;
}

template <typename S>
Tensor<S> tanh(const Tensor<S>& a) {
  Tensor<S> out(a.shape);
  for (std::size_t i = 0; i < a.numel(); ++i) out.data[i] = std::tanh(a.data[i]);
  flops::add(a.numel());
  return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  Tensor<S> out(a.shape);
  for (std::size_t i = 0; i < a.numel(); ++i) out.data[i] = a.data[i] > S(0) ? a.data[i] : S(0);
  flops::add(a.numel());
  return out;
}

// Softmax along one axis; slices are shifted by their max so large logits
// stay finite and the result is invariant to a constant shift.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, std::size_t axis) {
  if (axis >= x.ndim())
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                     x.shape_string());
  const std::size_t len = x.shape[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape[i];
  for (std::size_t i = axis + 1; i < x.ndim(); ++i) inner *= x.shape[i];

  Tensor<S> out(x.shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      S mx = x.data[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, x.data[base + k * inner]);
      S total = S(0);
      for (std::size_t k = 0; k < len; ++k) {
        const S e = std::exp(x.data[base + k * inner] - mx);
        out.data[base + k * inner] = e;
        total += e;
      }
      const S inv = S(1) / total;
      for (std::size_t k = 0; k < len; ++k) out.data[base + k * inner] *= inv;
    }
  }
  flops::add(5ull * x.numel());
  return out;
}

template <typename S>
Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<std::size_t>& idx) {
  x.require_ndim(2);
  if (idx.empty()) throw ShapeError("gather_rows: empty index list");
  Tensor<S> out({idx.size(), x.cols()});
  for (std::size_t m = 0; m < idx.size(); ++m) {
    if (idx[m] >= x.rows())
      throw IndexError("gather_rows: index " + std::to_string(idx[m]) + " out of range [0, " +
                       std::to_string(x.rows()) + ")");
    std::copy_n(&x.data[idx[m] * x.cols()], x.cols(), &out.data[m * x.cols()]);
  }
  return out;
}

template <typename S>
Tensor<S> scatter_add_rows(const Tensor<S>& x, const std::vector<std::size_t>& idx,
                           std::size_t out_rows) {
  x.require_ndim(2);
  if (idx.size() != x.rows())
    throw ShapeError("scatter_add_rows: " + std::to_string(idx.size()) + " indices for " +
                     std::to_string(x.rows()) + " rows");
  Tensor<S> out({out_rows, x.cols()});
  for (std::size_t m = 0; m < idx.size(); ++m) {
    if (idx[m] >= out_rows)
      throw IndexError("scatter_add_rows: index " + std::to_string(idx[m]) +
                       " out of range [0, " + std::to_string(out_rows) + ")");
    for (std::size_t c = 0; c < x.cols(); ++c) out.at(idx[m], c) += x.at(m, c);
  }
  flops::add(x.numel());
  return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  S total = S(0);
  for (S v : x.data) total += v;
  flops::add(x.numel());
  return Tensor<S>::scalar(total);
}

// Per-row mean/variance normalization (no learned affine part).
template <typename S>
Tensor<S> row_norm(const Tensor<S>& x, S eps) {
  x.require_ndim(2);
  Tensor<S> out(x.shape);
  const std::size_t c = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    S mean = S(0);
    for (std::size_t j = 0; j < c; ++j) mean += x.at(r, j);
    mean /= static_cast<S>(c);
    S var = S(0);
    for (std::size_t j = 0; j < c; ++j) {
      const S d = x.at(r, j) - mean;
      var += d * d;
    }
    var /= static_cast<S>(c);
    const S inv = S(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) out.at(r, j) = (x.at(r, j) - mean) * inv;
  }
  flops::add(8ull * x.numel());
  return out;
}

template <typename S>
S dot(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "dot");
  S total = S(0);
  for (std::size_t i = 0; i < a.numel(); ++i) total += a.data[i] * b.data[i];
  return total;
}

template <typename S>
S max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "max_abs_diff");
  S worst = S(0);
  for (std::size_t i = 0; i < a.numel(); ++i)
    worst = std::max(worst, std::abs(a.data[i] - b.data[i]));
  return worst;
}

template <typename S>
S max_rel_diff(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "max_rel_diff");
  S worst = S(0);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const S denom = std::max(S(1), std::abs(b.data[i]));
    worst = std::max(worst, std::abs(a.data[i] - b.data[i]) / denom);
  }
  return worst;
}

}  // namespace latfuse
