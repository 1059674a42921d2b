#include "llamba/quant.hpp"

#include <algorithm>
#include <cmath>

namespace llamba {

std::size_t QuantTensor::size() const {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::size_t QuantTensor::byte_size() const {
  // file layout: packed codes + f32 scales + packed zero-point nibbles
  return (size() + 1) / 2 + 4 * n_groups() + (n_groups() + 1) / 2;
}

double QuantTensor::decode(std::size_t i) const {
  std::size_t inner_n = inner();
  std::size_t row = i / inner_n, col = i % inner_n;
  std::size_t g = row * groups_per_row() + col / group_size;
  return static_cast<double>(scales[g]) *
         (static_cast<double>(code(i)) - static_cast<double>(zeros[g]));
}

QuantTensor quantize(const Tensor& w, std::size_t group_size, const std::string& name) {
  if (!w.all_finite())
    throw NumericError("quantize: non-finite weight in tensor '" + name + "'");
  if (group_size < 1) throw ConfigError("quantize: group_size must be >= 1");
  QuantTensor q;
  q.shape = w.shape();
  q.group_size = group_size;
  std::size_t n = w.size();
  std::size_t inner = q.inner();
  std::size_t rows = n / inner;
  std::size_t gpr = q.groups_per_row();
  q.scales.resize(rows * gpr);
  q.zeros.resize(rows * gpr);
  q.codes.assign((n + 1) / 2, 0);

  auto put_code = [&q](std::size_t i, std::uint8_t c) {
    if (i % 2 == 0)
      q.codes[i / 2] = static_cast<std::uint8_t>((q.codes[i / 2] & 0xf0) | c);
    else
      q.codes[i / 2] = static_cast<std::uint8_t>((q.codes[i / 2] & 0x0f) | (c << 4));
  };

  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t g = 0; g < gpr; ++g) {
      std::size_t lo = g * group_size;
      std::size_t hi = std::min(lo + group_size, inner);
      double mn = w.get(r * inner + lo), mx = mn;
      for (std::size_t c = lo; c < hi; ++c) {
        double v = w.get(r * inner + c);
        mn = std::min(mn, v);
        mx = std::max(mx, v);
      }
      std::size_t gi = r * gpr + g;
      if (mx == mn) {
        // constant group: represent the value exactly via the scale
        if (mn == 0.0) {
          q.scales[gi] = 1.0f;
          q.zeros[gi] = 0;
          for (std::size_t c = lo; c < hi; ++c) put_code(r * inner + c, 0);
        } else {
          q.scales[gi] = static_cast<float>(mn);
          q.zeros[gi] = 0;
          for (std::size_t c = lo; c < hi; ++c) put_code(r * inner + c, 1);
        }
        continue;
      }
      // widen the range to include zero so the zero point lies on the code
      // grid and codes never clamp; without this, groups that do not
      // straddle zero would exceed the scale/2 error bound
      mn = std::min(mn, 0.0);
      mx = std::max(mx, 0.0);
      double scale = (mx - mn) / 15.0;
      // round the stored f32 scale up one ulp if needed so 15*scale covers
      // the full range; with the zero point derived from the same stored
      // value, codes never clamp and the error stays within scale/2
      float fs = static_cast<float>(scale);
      if (static_cast<double>(fs) < scale) fs = std::nextafterf(fs, INFINITY);
      double fscale = static_cast<double>(fs);
      long zp = std::lround(-mn / fscale);
      zp = std::clamp(zp, 0L, 15L);
      q.scales[gi] = fs;
      q.zeros[gi] = static_cast<std::uint8_t>(zp);
      for (std::size_t c = lo; c < hi; ++c) {
        long code = std::lround(w.get(r * inner + c) / fscale) + zp;
        put_code(r * inner + c, static_cast<std::uint8_t>(std::clamp(code, 0L, 15L)));
      }
    }
  }
  return q;
}

Tensor dequantize(const QuantTensor& q, DType dt) {
  Tensor out = Tensor::zeros(q.shape, dt);
  for (std::size_t i = 0; i < q.size(); ++i) out.set(i, q.decode(i));
  return out;
}

Tensor dequant_matmul(const QuantTensor& q, const Tensor& x) {
  if (q.shape.size() != 2)
    throw DimensionError("dequant_matmul: quant tensor must be rank-2");
  std::size_t m = q.rows(), k = q.inner();
  if (x.size() != k)
    throw DimensionError("dequant_matmul: inner extents differ, quant [" + std::to_string(m) +
                         "x" + std::to_string(k) + "] vs x " + x.shape_str());
  Tensor y = Tensor::zeros({m}, x.dtype());
  std::size_t gpr = q.groups_per_row();
  for (std::size_t r = 0; r < m; ++r) {
    double acc = 0.0;
    for (std::size_t g = 0; g < gpr; ++g) {
      std::size_t lo = g * q.group_size;
      std::size_t hi = std::min(lo + q.group_size, k);
      std::size_t gi = r * gpr + g;
      double code_dot = 0.0, xsum = 0.0;
      for (std::size_t c = lo; c < hi; ++c) {
        double xv = x.get(c);
        code_dot += static_cast<double>(q.code(r * k + c)) * xv;
        xsum += xv;
      }
      acc += static_cast<double>(q.scales[gi]) *
             (code_dot - static_cast<double>(q.zeros[gi]) * xsum);
    }
    y.set(r, acc);
  }
  return y;
}

}  // namespace llamba
