#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "llamba/quant.hpp"

using namespace llamba;

TEST_SUITE("quant") {

TEST_CASE("constant group dequantizes exactly") {
  // exact at the f32 precision of the stored scale
  Tensor w = Tensor::full({32}, 0.7, DType::F32);
  QuantTensor q = quantize(w);
  Tensor back = dequantize(q, DType::F32);
  for (std::size_t i = 0; i < 32; ++i) CHECK(back.get(i) == w.get(i));
}

TEST_CASE("all-zeros round-trips exactly") {
  QuantTensor q = quantize(Tensor::zeros({4, 64}, DType::F64));
  Tensor back = dequantize(q, DType::F64);
  for (std::size_t i = 0; i < back.size(); ++i) CHECK(back.get(i) == 0.0);
}

TEST_CASE("group parameters follow the affine min/max scheme") {
  std::vector<double> vals(32);
  for (int i = 0; i < 32; ++i) vals[i] = -1.0 + 2.0 * i / 31.0;  // min -1, max 1
  QuantTensor q = quantize(Tensor::from({32}, vals));
  REQUIRE(q.n_groups() == 1);
  CHECK(q.scales[0] == doctest::Approx(2.0 / 15.0));
  // -min/scale = 7.5 is a rounding half-point, so the zero point lands on
  // 7 or 8 depending on the stored f32 scale; the endpoints still round-trip
  // within scale/2
  CHECK(q.zeros[0] >= 7);
  CHECK(q.zeros[0] <= 8);
  double s = q.scales[0];
  CHECK(std::abs(s * (q.code(0) - q.zeros[0]) - (-1.0)) <= s / 2);
  CHECK(std::abs(s * (q.code(31) - q.zeros[0]) - 1.0) <= s / 2);
}

TEST_CASE("per-element round-trip error bounded by scale/2") {
  std::mt19937_64 rng(100);
  for (int it = 0; it < 50; ++it) {
    Tensor w = Tensor::randn({8, 32}, rng, 2.0);
    QuantTensor q = quantize(w);
    Tensor back = dequantize(q, DType::F64);
    for (std::size_t i = 0; i < w.size(); ++i) {
      double s = q.scales[i / 32];
      CHECK(std::abs(w.get(i) - back.get(i)) <= s / 2 + 1e-7);
    }
  }
}

TEST_CASE("ragged last group handled per row") {
  Tensor w = testing::randn({2, 40}, 101);  // groups of 32 + 8 per row
  QuantTensor q = quantize(w);
  CHECK(q.groups_per_row() == 2);
  CHECK(q.n_groups() == 4);
  Tensor back = dequantize(q, DType::F64);
  for (std::size_t i = 0; i < w.size(); ++i) {
    double s = q.scales[(i / 40) * 2 + (i % 40) / 32];
    CHECK(std::abs(w.get(i) - back.get(i)) <= s / 2 + 1e-7);
  }
}

TEST_CASE("packing is little-nibble-first") {
  // 33 elements: codes known from a two-point group
  std::vector<double> vals(4, 0.0);
  vals[1] = 15.0;  // scale 1, zp 0 -> codes {0,15,0,0}
  QuantTensor q = quantize(Tensor::from({4}, vals), 4);
  CHECK(q.codes[0] == 0xf0);  // code(0)=0 in low nibble, code(1)=15 in high
  CHECK(q.code(1) == 15);
}

TEST_CASE("byte size obeys the accounting bound") {
  Tensor w = testing::randn({16, 64}, 102);
  QuantTensor q = quantize(w);
  std::size_t n = w.size();
  CHECK(q.byte_size() <= (n + 1) / 2 + (n / 32) * 5);
  // ~5.1 bits/weight at group 32, an ~6.2x reduction from f32
  double bits = 8.0 * q.byte_size() / n;
  CHECK(bits < 5.2);
}

TEST_CASE("non-finite weights rejected with the tensor name") {
  Tensor w = Tensor::full({32}, std::numeric_limits<double>::quiet_NaN(), DType::F64);
  CHECK_THROWS_WITH_AS(quantize(w, 32, "blocks.0.mixer.0.W_B"),
                       doctest::Contains("blocks.0.mixer.0.W_B"), NumericError);
}

TEST_CASE("dequant_matmul matches the dequantize-then-matmul oracle exactly") {
  std::mt19937_64 rng(103);
  Tensor w = Tensor::randn({8, 32}, rng);
  Tensor x = Tensor::randn({32}, rng);
  QuantTensor q = quantize(w);
  Tensor fused = dequant_matmul(q, x);
  Tensor oracle = matmul(dequantize(q, DType::F64), reshape(x, {32, 1}));
  REQUIRE(fused.size() == 8);
  for (std::size_t i = 0; i < 8; ++i)
    CHECK(std::abs(fused.get(i) - oracle.get(i)) <= 1e-6 * (std::abs(oracle.get(i)) + 1.0));
}

TEST_CASE("dequant_matmul: identity-ish and zero input") {
  QuantTensor q = quantize(scale(Tensor::identity(32), 1.0));
  Tensor x = testing::randn({32}, 104);
  Tensor y = dequant_matmul(q, x);
  for (std::size_t i = 0; i < 32; ++i)
    CHECK(std::abs(y.get(i) - x.get(i)) < 0.2);  // within quantization error
  Tensor zero = Tensor::zeros({32}, DType::F64);
  CHECK(sum(dequant_matmul(q, zero)) == 0.0);

  CHECK_THROWS_AS(dequant_matmul(q, Tensor::zeros({16}, DType::F64)), DimensionError);
}

}  // TEST_SUITE
