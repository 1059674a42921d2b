#include "llamba/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace llamba {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

void check_shape(const std::vector<std::size_t>& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
  for (auto e : shape)
    if (e < 1) throw DimensionError("tensor extents must be >= 1");
}

}  // namespace

void Tensor::alloc() {
  check_shape(shape_);
  std::size_t n = product(shape_);
  if (dtype_ == DType::F32) f32_.assign(n, 0.0f);
  else f64_.assign(n, 0.0);
}

std::size_t Tensor::size() const { return product(shape_); }

std::size_t Tensor::rows() const {
  if (rank() != 2) throw DimensionError("rows() requires a rank-2 tensor, got " + shape_str());
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw DimensionError("cols() requires a rank-2 tensor, got " + shape_str());
  return shape_[1];
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, DType dt) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.dtype_ = dt;
  t.f32_.clear();
  t.alloc();
  return t;
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, DType dt) {
  Tensor t = zeros(std::move(shape), dt);
  for (std::size_t i = 0; i < t.size(); ++i) t.set(i, value);
  return t;
}

Tensor Tensor::scalar(double value, DType dt) { return full({1}, value, dt); }

Tensor Tensor::from(std::vector<std::size_t> shape, const std::vector<double>& values, DType dt) {
  Tensor t = zeros(std::move(shape), dt);
  if (values.size() != t.size())
    throw DimensionError("value count " + std::to_string(values.size()) +
                         " does not match shape " + t.shape_str());
  for (std::size_t i = 0; i < values.size(); ++i) t.set(i, values[i]);
  return t;
}

Tensor Tensor::randn(std::vector<std::size_t> shape, std::mt19937_64& rng, double stddev,
                     DType dt) {
  Tensor t = zeros(std::move(shape), dt);
  std::normal_distribution<double> dist(0.0, stddev);
  for (std::size_t i = 0; i < t.size(); ++i) t.set(i, dist(rng));
  return t;
}

Tensor Tensor::identity(std::size_t n, DType dt) {
  Tensor t = zeros({n, n}, dt);
  for (std::size_t i = 0; i < n; ++i) t.set(i * n + i, 1.0);
  return t;
}

Tensor Tensor::cast(DType dt) const {
  if (dt == dtype_) return *this;
  Tensor t = zeros(shape_, dt);
  for (std::size_t i = 0; i < size(); ++i) t.set(i, get(i));
  return t;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
  os << "]";
  return os.str();
}

bool Tensor::all_finite() const {
  for (std::size_t i = 0; i < size(); ++i)
    if (!std::isfinite(get(i))) return false;
  return true;
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
  if (a.dtype() != b.dtype())
    throw DimensionError(std::string(op) + ": dtype mismatch " +
                         std::string(dtype_name(a.dtype())) + " vs " + dtype_name(b.dtype()));
}

template <typename T>
void matmul_kernel(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
                   std::size_t k, std::size_t n) {
  // i-k-j order, accumulate in double.
  std::vector<double> row(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(row.begin(), row.end(), 0.0);
    const T* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      double av = static_cast<double>(arow[p]);
      if (av == 0.0) continue;
      const T* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * static_cast<double>(brow[j]);
    }
    T* crow = c.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<T>(row[j]);
  }
}

template <typename F>
Tensor unary(const Tensor& a, F f) {
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  for (std::size_t i = 0; i < a.size(); ++i) out.set(i, f(a.get(i)));
  return out;
}

template <typename F>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, F f) {
  require_same_shape(a, b, name);
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  for (std::size_t i = 0; i < a.size(); ++i) out.set(i, f(a.get(i), b.get(i)));
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul: requires rank-2 operands, got " + a.shape_str() + " and " +
                         b.shape_str());
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner extents differ, " + a.shape_str() + " x " +
                         b.shape_str());
  if (a.dtype() != b.dtype())
    throw DimensionError("matmul: dtype mismatch " + std::string(dtype_name(a.dtype())) + " vs " +
                         dtype_name(b.dtype()));
  Tensor c = Tensor::zeros({a.rows(), b.cols()}, a.dtype());
  if (a.dtype() == DType::F32)
    matmul_kernel<float>(a.data<float>(), b.data<float>(), c.data<float>(), a.rows(), a.cols(),
                         b.cols());
  else
    matmul_kernel<double>(a.data<double>(), b.data<double>(), c.data<double>(), a.rows(),
                          a.cols(), b.cols());
  return c;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(a, b, "add", [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(a, b, "sub", [](double x, double y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(a, b, "mul", [](double x, double y) { return x * y; });
}

Tensor scale(const Tensor& a, double c) {
  return unary(a, [c](double x) { return x * c; });
}

Tensor silu(const Tensor& a) {
  return unary(a, [](double x) { return x / (1.0 + std::exp(-x)); });
}

Tensor sigmoid(const Tensor& a) {
  return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); });
}

Tensor softmax_rows(const Tensor& a, bool causal) {
  if (a.rank() != 2) throw DimensionError("softmax_rows: requires rank-2 input");
  std::size_t m = a.rows(), n = a.cols();
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t lim = causal ? std::min(i + 1, n) : n;
    if (lim == 0) throw DimensionError("softmax_rows: row " + std::to_string(i) + " fully masked");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < lim; ++j) mx = std::max(mx, a.at(i, j));
    double denom = 0.0;
    for (std::size_t j = 0; j < lim; ++j) denom += std::exp(a.at(i, j) - mx);
    for (std::size_t j = 0; j < lim; ++j) out.set_at(i, j, std::exp(a.at(i, j) - mx) / denom);
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose: requires rank-2 input");
  Tensor out = Tensor::zeros({a.cols(), a.rows()}, a.dtype());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out.set_at(j, i, a.at(i, j));
  return out;
}

Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
  Tensor out = Tensor::zeros(std::move(shape), a.dtype());
  if (out.size() != a.size())
    throw DimensionError("reshape: element count mismatch " + a.shape_str() + " -> " +
                         out.shape_str());
  for (std::size_t i = 0; i < a.size(); ++i) out.set(i, a.get(i));
  return out;
}

Tensor broadcast_rows(const Tensor& v, std::size_t rows) {
  std::size_t d = v.size();
  if (v.rank() > 2 || (v.rank() == 2 && v.shape()[0] != 1))
    throw DimensionError("broadcast_rows: expects a vector, got " + v.shape_str());
  Tensor out = Tensor::zeros({rows, d}, v.dtype());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < d; ++j) out.set_at(i, j, v.get(j));
  return out;
}

double sum(const Tensor& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.get(i);
  return s;
}

double mean(const Tensor& a) { return sum(a) / static_cast<double>(a.size()); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.get(i) - b.get(i)));
  return m;
}

double rel_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw DimensionError("rel_diff: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = std::abs(a.get(i) - b.get(i)) / (std::abs(b.get(i)) + 1e-30);
    m = std::max(m, d);
  }
  return m;
}

}  // namespace llamba
