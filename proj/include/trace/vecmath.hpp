#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "trace/error.hpp"

namespace trace {

// Storage is 32-bit float; reductions accumulate in double.

inline bool all_finite(std::span<const float> v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// Dense real vector with a fixed, positive dimension and finite entries.
class EmbeddingVector {
 public:
  EmbeddingVector() = default;

  explicit EmbeddingVector(std::vector<float> values) : values_(std::move(values)) {
    if (values_.empty()) fail(ErrorCode::InvalidDims, "embedding must have dim >= 1");
    if (!all_finite(values_)) fail(ErrorCode::NonFinite, "embedding contains NaN/Inf");
  }

  EmbeddingVector(std::initializer_list<float> values)
      : EmbeddingVector(std::vector<float>(values)) {}

  std::size_t dim() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }
  std::span<const float> values() const noexcept { return values_; }
  const std::vector<float>& vec() const noexcept { return values_; }
  float operator[](std::size_t i) const { return values_[i]; }

  auto begin() const noexcept { return values_.begin(); }
  auto end() const noexcept { return values_.end(); }

  friend bool operator==(const EmbeddingVector&, const EmbeddingVector&) = default;

 private:
  std::vector<float> values_;
};

/// Row-major matrix of floats.
class DenseMatrix {
 public:
  DenseMatrix() = default;

  DenseMatrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), values_(rows * cols, 0.0f) {
    if (rows == 0 || cols == 0) fail(ErrorCode::InvalidDims, "matrix dims must be positive");
  }

  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<float> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (rows == 0 || cols == 0) fail(ErrorCode::InvalidDims, "matrix dims must be positive");
    if (values_.size() != rows * cols) {
      fail(ErrorCode::DimMismatch, "matrix storage length " + std::to_string(values_.size()) +
                                       " != " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    if (!all_finite(values_)) fail(ErrorCode::NonFinite, "matrix contains NaN/Inf");
  }

  static DenseMatrix identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::span<const float> values() const noexcept { return values_; }
  std::span<float> values() noexcept { return values_; }
  std::span<const float> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

  float operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  float& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> values_;
};

inline void check_same_dim(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    fail(ErrorCode::DimMismatch,
         std::string(what) + ": " + std::to_string(a) + " vs " + std::to_string(b));
  }
}

/// Dot product with double accumulation. Eight independent partial sums keep
/// the loop pipelined; the combination order is fixed so results are
/// reproducible.
inline double dot(std::span<const float> a, std::span<const float> b) {
  const std::size_t n = a.size();
  const float* pa = a.data();
  const float* pb = b.data();
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) {
      acc[l] += static_cast<double>(pa[i + l]) * static_cast<double>(pb[i + l]);
    }
  }
  for (std::size_t l = 0; i < n; ++i, ++l) {
    acc[l] += static_cast<double>(pa[i]) * static_cast<double>(pb[i]);
  }
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

inline double norm2(std::span<const float> v) { return std::sqrt(dot(v, v)); }

inline constexpr double kZeroNorm = 1e-12;

inline EmbeddingVector l2_normalize(std::span<const float> v) {
  if (v.empty()) fail(ErrorCode::InvalidDims, "cannot normalize an empty vector");
  if (!all_finite(v)) fail(ErrorCode::NonFinite, "l2_normalize input contains NaN/Inf");
  const double n = norm2(v);
  if (!(n > kZeroNorm)) fail(ErrorCode::ZeroVector, "l2_normalize of a zero vector");
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = static_cast<float>(static_cast<double>(v[i]) / n);
  }
  return EmbeddingVector(std::move(out));
}

inline EmbeddingVector l2_normalize(const EmbeddingVector& v) { return l2_normalize(v.values()); }

inline bool is_unit_norm(std::span<const float> v, double tol = 1e-5) {
  return std::abs(norm2(v) - 1.0) <= tol;
}

inline double clamp_cosine(double c) { return std::clamp(c, -1.0, 1.0); }

inline double cosine(std::span<const float> u, std::span<const float> v) {
  check_same_dim(u.size(), v.size(), "cosine");
  const double nu = norm2(u);
  const double nv = norm2(v);
  if (!(nu > kZeroNorm) || !(nv > kZeroNorm)) fail(ErrorCode::ZeroVector, "cosine of a zero vector");
  return clamp_cosine(dot(u, v) / (nu * nv));
}

inline double cosine(const EmbeddingVector& u, const EmbeddingVector& v) {
  return cosine(u.values(), v.values());
}

inline double scale_by_temperature(double similarity, double tau) {
  if (!(tau > 0.0)) fail(ErrorCode::NonPositiveTemperature, "temperature must be > 0");
  return similarity / tau;
}

inline double scaled_cosine(const EmbeddingVector& u, const EmbeddingVector& v, double tau) {
  if (!(tau > 0.0)) fail(ErrorCode::NonPositiveTemperature, "temperature must be > 0");
  return cosine(u, v) / tau;
}

inline std::vector<double> softmax(std::span<const double> x) {
  if (x.empty()) fail(ErrorCode::EmptyInput, "softmax of empty input");
  if (!all_finite(x)) fail(ErrorCode::NonFinite, "softmax input contains NaN/Inf");
  const double mx = *std::max_element(x.begin(), x.end());
  std::vector<double> out(x.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    sum += out[i];
  }
  for (auto& o : out) o /= sum;
  return out;
}

inline constexpr double kLayerNormEps = 1e-5;

/// Standardizes x to zero mean / unit variance (biased variance), then
/// applies the affine gamma/beta.
inline std::vector<float> layer_norm(std::span<const float> x, std::span<const float> gamma,
                                     std::span<const float> beta, double eps = kLayerNormEps) {
  check_same_dim(x.size(), gamma.size(), "layer_norm gamma");
  check_same_dim(x.size(), beta.size(), "layer_norm beta");
  if (x.empty()) fail(ErrorCode::EmptyInput, "layer_norm of empty input");
  if (!(eps > 0.0)) fail(ErrorCode::InvalidArgument, "layer_norm eps must be > 0");
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (float v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (float v : x) {
    const double d = v - mean;
    var += d * d;
  }
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = static_cast<float>((x[i] - mean) * inv * gamma[i] + beta[i]);
  }
  return out;
}

/// y = x * M for a row vector x (length M.rows()), accumulated in double.
inline std::vector<float> vec_mat(std::span<const float> x, const DenseMatrix& m) {
  check_same_dim(x.size(), m.rows(), "vec_mat");
  std::vector<double> acc(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double xr = x[r];
    if (xr == 0.0) continue;
    const float* row = m.values().data() + r * m.cols();
    for (std::size_t c = 0; c < m.cols(); ++c) acc[c] += xr * static_cast<double>(row[c]);
  }
  return {acc.begin(), acc.end()};
}

}  // namespace trace
