#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "llamba/errors.hpp"

namespace llamba {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

inline std::size_t dtype_size(DType dt) { return dt == DType::F32 ? 4 : 8; }
inline const char* dtype_name(DType dt) { return dt == DType::F32 ? "f32" : "f64"; }

// Dense row-major n-dimensional array. Contiguous, no views, no implicit
// broadcasting. Immutable by convention once built (mutation is only used
// by initializers and the optimizer, which own their tensors).
class Tensor {
 public:
  Tensor() : shape_{1}, dtype_(DType::F32), f32_(1, 0.0f) {}

  static Tensor zeros(std::vector<std::size_t> shape, DType dt = DType::F32);
  static Tensor full(std::vector<std::size_t> shape, double value, DType dt = DType::F32);
  static Tensor scalar(double value, DType dt = DType::F64);
  static Tensor from(std::vector<std::size_t> shape, const std::vector<double>& values,
                     DType dt = DType::F64);
  // Gaussian fill, mean 0 / given stddev.
  static Tensor randn(std::vector<std::size_t> shape, std::mt19937_64& rng,
                      double stddev = 1.0, DType dt = DType::F64);
  static Tensor identity(std::size_t n, DType dt = DType::F64);

  const std::vector<std::size_t>& shape() const { return shape_; }
  DType dtype() const { return dtype_; }
  std::size_t size() const;
  std::size_t rank() const { return shape_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  double get(std::size_t i) const {
    return dtype_ == DType::F32 ? static_cast<double>(f32_[i]) : f64_[i];
  }
  void set(std::size_t i, double v) {
    if (dtype_ == DType::F32) f32_[i] = static_cast<float>(v);
    else f64_[i] = v;
  }
  double at(std::size_t r, std::size_t c) const { return get(r * cols() + c); }
  void set_at(std::size_t r, std::size_t c, double v) { set(r * cols() + c, v); }

  template <typename T>
  std::span<const T> data() const;
  template <typename T>
  std::span<T> data();

  Tensor cast(DType dt) const;
  std::string shape_str() const;
  bool all_finite() const;
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  std::vector<std::size_t> shape_;
  DType dtype_;
  std::vector<float> f32_;
  std::vector<double> f64_;

  void alloc();
};

template <>
inline std::span<const float> Tensor::data<float>() const { return {f32_.data(), f32_.size()}; }
template <>
inline std::span<const double> Tensor::data<double>() const { return {f64_.data(), f64_.size()}; }
template <>
inline std::span<float> Tensor::data<float>() { return {f32_.data(), f32_.size()}; }
template <>
inline std::span<double> Tensor::data<double>() { return {f64_.data(), f64_.size()}; }

// --- kernels -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor silu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);

// Row softmax for 2-D tensors; with causal=true entry (i,j) for j>i is
// masked to exactly zero. Stabilized by row-max subtraction.
Tensor softmax_rows(const Tensor& a, bool causal = false);

Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<std::size_t> shape);
// Tile a length-d vector (shape [d] or [1,d]) into [rows, d].
Tensor broadcast_rows(const Tensor& v, std::size_t rows);

double sum(const Tensor& a);
double mean(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);
double rel_diff(const Tensor& a, const Tensor& b);  // max |a-b| / (|b|+1e-30) elementwise

}  // namespace llamba
