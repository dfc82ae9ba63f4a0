#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "relook/error.hpp"

namespace relook {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major tensor of rank 1 or 2 with an optional gradient buffer.
///
/// Rank-1 tensors of extent n behave as 1xn rows where a matrix is expected.
template <typename T = float>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
    validate_shape();
    if (shape_numel(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * cols(), cols());
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  bool has_grad() const { return grad_.has_value(); }
  std::span<T> grad() {
    ensure_grad();
    return *grad_;
  }
  std::span<const T> grad() const {
    if (!grad_) throw Error("tensor has no gradient buffer");
    return *grad_;
  }
  void ensure_grad() {
    if (!grad_) grad_.emplace(data_.size(), T{0});
  }
  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), T{0});
  }
  void drop_grad() { grad_.reset(); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.values().begin(),
                   [](T v) { return static_cast<U>(v); });
    out.set_requires_grad(requires_grad_);
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    if (shape_.empty() || shape_.size() > 2) {
      throw DimensionError("tensor rank must be 1 or 2, got shape " + shape_str(shape_));
    }
    for (auto e : shape_) {
      if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
  bool requires_grad_ = false;
  std::optional<std::vector<T>> grad_;
};

// Row-wise numeric kernels shared by the taped and the incremental paths. Each
// output row depends only on the matching input row, so computing one row at a
// time gives bit-identical results to computing the whole matrix.
namespace kernels {

/// C[MxN] = A[MxK] * B[KxN], double accumulation per output row.
template <typename T>
void matmul_nn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
               std::size_t k, std::size_t n) {
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const T* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = static_cast<double>(arow[p]);
      if (av == 0.0) continue;
      const T* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<double>(brow[j]);
    }
    T* crow = c.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<T>(acc[j]);
  }
}

/// C[MxN] = A[MxK] * B[NxK]^T.
template <typename T>
void matmul_nt(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
               std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b.data() + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += static_cast<double>(arow[p]) * brow[p];
      c[i * n + j] = static_cast<T>(acc);
    }
  }
}

/// C[MxN] += A[KxM]^T * B[KxN].
template <typename T>
void matmul_tn_acc(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t k,
                   std::size_t m, std::size_t n) {
  std::vector<double> acc(m * n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a.data() + p * m;
    const T* brow = b.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = static_cast<double>(arow[i]);
      if (av == 0.0) continue;
      double* out = acc.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) out[j] += av * static_cast<double>(brow[j]);
    }
  }
  for (std::size_t i = 0; i < m * n; ++i) c[i] += static_cast<T>(acc[i]);
}

/// out = softmax(scale * in) over the first `valid` entries; the rest are 0.
template <typename T>
void softmax_row(std::span<const T> in, std::span<T> out, std::size_t valid, double scale = 1.0) {
  double mx = -INFINITY;
  for (std::size_t j = 0; j < valid; ++j) mx = std::max(mx, scale * static_cast<double>(in[j]));
  double sum = 0.0;
  std::vector<double> e(valid);
  for (std::size_t j = 0; j < valid; ++j) {
    e[j] = std::exp(scale * static_cast<double>(in[j]) - mx);
    sum += e[j];
  }
  for (std::size_t j = 0; j < valid; ++j) out[j] = static_cast<T>(e[j] / sum);
  for (std::size_t j = valid; j < out.size(); ++j) out[j] = T{0};
}

/// log-sum-exp of a row, computed stably.
template <typename T>
double logsumexp_row(std::span<const T> in) {
  double mx = -INFINITY;
  for (T v : in) mx = std::max(mx, static_cast<double>(v));
  double sum = 0.0;
  for (T v : in) sum += std::exp(static_cast<double>(v) - mx);
  return mx + std::log(sum);
}

struct NormStats {
  double mean;
  double rstd;
};

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
NormStats layer_norm_row(std::span<const T> x, std::span<const T> gamma, std::span<const T> beta,
                         std::span<T> out) {
  const std::size_t n = x.size();
  double mean = 0.0;
  for (T v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (T v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = static_cast<T>((x[j] - mean) * rstd * gamma[j] + beta[j]);
  }
  return {mean, rstd};
}

// GELU, tanh approximation.
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

inline double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

}  // namespace kernels
}  // namespace relook
