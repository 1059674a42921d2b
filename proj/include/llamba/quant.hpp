#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "llamba/tensor.hpp"

namespace llamba {

// 4-bit group-quantized tensor. Asymmetric affine per group: groups of
// `group_size` tile the innermost dimension (the last group of each row may
// be ragged). Codes are packed two per byte, little nibble first.
struct QuantTensor {
  std::vector<std::size_t> shape;
  std::size_t group_size = 32;
  std::vector<float> scales;        // one per group
  std::vector<std::uint8_t> zeros;  // one per group, values in [0, 15]
  std::vector<std::uint8_t> codes;  // packed nibbles, ceil(n/2) bytes

  std::size_t size() const;
  std::size_t rows() const { return shape.at(0); }
  std::size_t inner() const { return shape.back(); }
  std::size_t groups_per_row() const { return (inner() + group_size - 1) / group_size; }
  std::size_t n_groups() const { return scales.size(); }
  // payload bytes (codes + scales + zero-points), excluding any file header
  std::size_t byte_size() const;

  std::uint8_t code(std::size_t i) const {
    std::uint8_t b = codes[i / 2];
    return (i % 2 == 0) ? (b & 0x0f) : (b >> 4);
  }
  double decode(std::size_t i) const;
};

QuantTensor quantize(const Tensor& w, std::size_t group_size = 32,
                     const std::string& name = "");
Tensor dequantize(const QuantTensor& q, DType dt = DType::F32);

// y = q . x for q[M x K], x[K]; fused over packed nibbles. Matches
// matmul(dequantize(q), x) within 1e-6 relative.
Tensor dequant_matmul(const QuantTensor& q, const Tensor& x);

}  // namespace llamba
