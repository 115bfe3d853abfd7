#pragma once

// Forward-only dense kernels. The autodiff tape calls these for its forward
// pass; inference paths call them directly.

#include <algorithm>
#include <cmath>
#include <string>

#include "tensor.hpp"

namespace crs::ops {

namespace detail {

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected rank-2 operand, got " + shape_str(t.shape()));
}

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

inline void check_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": produced a non-finite value");
}

/// a[m,k] * b[k,n]; zero entries of `a` are skipped, which makes sparse
/// count inputs cheap.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = &out[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &b[p * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

/// Elementwise a + b, or a[m,n] + b[1,n] broadcast over rows.
inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "add");
  detail::require_rank2(b, "add");
  Tensor out = a;
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  } else if (b.rows() == 1 && b.cols() == a.cols()) {
    const std::size_t n = a.cols();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % n];
  } else {
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "sub");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "mul");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = a;
  for (auto& v : out.values()) v *= c;
  return out;
}

template <class F>
Tensor map(const Tensor& a, F&& f) {
  Tensor out = a;
  for (auto& v : out.values()) v = f(v);
  return out;
}

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor relu(const Tensor& a) { return map(a, [](double v) { return v > 0.0 ? v : 0.0; }); }
inline Tensor sigmoid(const Tensor& a) { return map(a, sigmoid_scalar); }
inline Tensor tanh(const Tensor& a) { return map(a, [](double v) { return std::tanh(v); }); }

/// Row-wise softmax.
inline Tensor softmax(const Tensor& a) {
  detail::require_rank2(a, "softmax");
  Tensor out = a;
  const std::size_t n = a.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto row = out.row_span(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (auto& v : row) {
      v = std::exp(v - mx);
      z += v;
    }
    for (auto& v : row) v /= z;
  }
  (void)n;
  return out;
}

/// Row-wise log-softmax (stable).
inline Tensor log_softmax(const Tensor& a) {
  detail::require_rank2(a, "log_softmax");
  Tensor out = a;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto row = out.row_span(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double lz = mx + std::log(z);
    for (auto& v : row) v -= lz;
  }
  return out;
}

/// Column-wise concatenation of a[m,p] and b[m,q] into [m,p+q].
inline Tensor concat(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "concat");
  detail::require_rank2(b, "concat");
  if (a.rows() != b.rows())
    throw DimensionError("concat: row counts differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t m = a.rows(), p = a.cols(), q = b.cols();
  Tensor out = Tensor::zeros({m, p + q});
  for (std::size_t r = 0; r < m; ++r) {
    std::copy_n(&a[r * p], p, &out[r * (p + q)]);
    std::copy_n(&b[r * q], q, &out[r * (p + q) + p]);
  }
  return out;
}

inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_rank2(a, "slice_cols");
  if (begin > end || end > a.cols())
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " +
                         shape_str(a.shape()));
  const std::size_t m = a.rows(), n = a.cols(), w = end - begin;
  Tensor out = Tensor::zeros({m, w});
  for (std::size_t r = 0; r < m; ++r) std::copy_n(&a[r * n + begin], w, &out[r * w]);
  return out;
}

}  // namespace crs::ops
