#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "llamba/mixer.hpp"

using namespace llamba;

namespace {

// Identity init perturbed with noise: a generic random-but-stable mixer
// (a stays in (0,1) by construction).
MixerParams random_mixer(int d, int h, int p, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  MixerParams mp = init_mixer(d, h, p, n, rng);
  std::normal_distribution<double> gauss(0.0, 0.5);
  auto perturb = [&](std::vector<Tensor>& ts) {
    for (auto& t : ts)
      for (std::size_t i = 0; i < t.size(); ++i) t.set(i, t.get(i) + gauss(rng));
  };
  perturb(mp.W_x);
  perturb(mp.W_z);
  perturb(mp.b_z);
  perturb(mp.W_B);
  perturb(mp.W_C);
  perturb(mp.w_a);
  perturb(mp.b_a);
  perturb(mp.conv_x);
  perturb(mp.conv_B);
  perturb(mp.conv_C);
  perturb(mp.D);
  perturb(mp.W_out);
  return mp;
}

Tensor run_recurrent(const MixerParams& p, const Tensor& x) {
  RecurrentState st = init_state(p);
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  for (std::size_t t = 0; t < x.rows(); ++t) {
    Tensor row = Tensor::zeros({1, x.cols()}, x.dtype());
    for (std::size_t j = 0; j < x.cols(); ++j) row.set(j, x.at(t, j));
    Tensor y = recurrent_step(p, st, row);
    for (std::size_t j = 0; j < x.cols(); ++j) out.set_at(t, j, y.get(j));
  }
  return out;
}

}  // namespace

TEST_SUITE("mixer") {

TEST_CASE("three-way equivalence on 100 random instances") {
  std::mt19937_64 meta(2024);
  for (int it = 0; it < 100; ++it) {
    int h = 1 + static_cast<int>(meta() % 4);
    int p = 2 + static_cast<int>(meta() % 3);
    int n = 2 + static_cast<int>(meta() % 3);
    int d = h * p;
    int t_len = 2 + static_cast<int>(meta() % 15);
    MixerParams mp = random_mixer(d, h, p, n, meta());
    Tensor x = testing::randn({static_cast<std::size_t>(t_len), static_cast<std::size_t>(d)},
                              meta());
    Tensor rec = run_recurrent(mp, x);
    Tensor mat = forward_materialized(mp, x);
    REQUIRE(rel_diff(mat, rec) < 1e-9);
    for (std::size_t q : {std::size_t{1}, std::size_t{3}, static_cast<std::size_t>(t_len)})
      REQUIRE(rel_diff(forward_parallel(mp, x, q), rec) < 1e-9);
  }
}

TEST_CASE("chunked scan rejects chunk 0 and clamps oversized chunks") {
  MixerParams mp = random_mixer(4, 2, 2, 3, 5);
  Tensor x = testing::randn({6, 4}, 6);
  CHECK_THROWS_AS(forward_parallel(mp, x, 0), ConfigError);
  CHECK(rel_diff(forward_parallel(mp, x, 99), forward_parallel(mp, x, 6)) == 0.0);
}

TEST_CASE("causality: future inputs never affect past outputs") {
  MixerParams mp = random_mixer(4, 2, 2, 3, 7);
  Tensor x = testing::randn({8, 4}, 8);
  Tensor y1 = forward_materialized(mp, x);
  Tensor x2 = x;
  for (std::size_t j = 0; j < 4; ++j) x2.set_at(6, j, 99.0);  // poke t=6
  Tensor y2 = forward_materialized(mp, x2);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t j = 0; j < 4; ++j) CHECK(y1.at(t, j) == y2.at(t, j));
  CHECK(max_abs_diff(y1, y2) > 0.0);
}

TEST_CASE("materialized matrices are lower triangular with unit-free diagonal scaling") {
  MixerParams mp = random_mixer(4, 2, 2, 3, 9);
  Tensor x = testing::randn({5, 4}, 10);
  MixerProjections proj = project_inputs(mp, x);
  for (const Tensor& m : materialize_mixer(proj)) {
    REQUIRE(m.rows() == 5);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = i + 1; j < 5; ++j) CHECK(m.at(i, j) == 0.0);
  }
  Tensor stacked = materialize_mixer_stacked(proj);
  CHECK(stacked.shape() == std::vector<std::size_t>{2, 5, 5});
}

TEST_CASE("decay factors stay strictly inside (0,1)") {
  MixerParams mp = random_mixer(4, 2, 2, 3, 11);
  Tensor x = testing::randn({16, 4}, 12, 10.0);  // extreme inputs
  MixerProjections proj = project_inputs(mp, x);
  for (const Tensor& a : proj.a)
    for (std::size_t t = 0; t < a.size(); ++t) {
      CHECK(a.get(t) > 0.0);
      CHECK(a.get(t) < 1.0);
    }
}

TEST_CASE("long-sequence stability: state stays bounded") {
  MixerParams mp = random_mixer(4, 2, 2, 3, 13);
  RecurrentState st = init_state(mp);
  std::mt19937_64 rng(14);
  for (int t = 0; t < 512; ++t) {
    Tensor row = Tensor::randn({1, 4}, rng);
    Tensor y = recurrent_step(mp, st, row);
    REQUIRE(y.all_finite());
  }
  for (const Tensor& s : st.S) CHECK(s.all_finite());
}

TEST_CASE("identity init: fresh block is the exact identity when H*P == d") {
  std::mt19937_64 rng(15);
  MixerParams mp = init_mixer(8, 2, 4, 3, rng);
  CHECK(exact_identity(mp));
  Tensor x = testing::randn({10, 8}, 16);
  CHECK(max_abs_diff(forward_materialized(mp, x), x) < 1e-6);
  CHECK(max_abs_diff(run_recurrent(mp, x), x) < 1e-6);

  // materialized mixing matrices are exactly zero at init (C starts at 0)
  MixerProjections proj = project_inputs(mp, x);
  for (const Tensor& m : materialize_mixer(proj)) CHECK(sum(m) == 0.0);
}

TEST_CASE("identity init: H*P != d falls back to approximate identity") {
  std::mt19937_64 rng(17);
  MixerParams mp = init_mixer(8, 2, 3, 3, rng);
  CHECK_FALSE(exact_identity(mp));
}

TEST_CASE("silu unit bias solves x*sigmoid(x) = 1") {
  double b = silu_unit_bias();
  CHECK(std::abs(b / (1.0 + std::exp(-b)) - 1.0) < 1e-12);
  CHECK(b == doctest::Approx(1.27846454).epsilon(1e-7));
}

TEST_CASE("recurrent state size is constant in position") {
  MixerParams mp = random_mixer(4, 2, 2, 3, 18);
  RecurrentState st = init_state(mp);
  std::size_t fresh = st.byte_size();
  CHECK(fresh > 0);
  std::mt19937_64 rng(19);
  for (int t = 0; t < 100; ++t) recurrent_step(mp, st, Tensor::randn({1, 4}, rng));
  CHECK(st.byte_size() == fresh);
  CHECK(st.position == 100);
}

TEST_CASE("recurrent step rejects non-finite input naming the head") {
  MixerParams mp = random_mixer(4, 2, 2, 3, 20);
  RecurrentState st = init_state(mp);
  Tensor bad = Tensor::full({1, 4}, std::numeric_limits<double>::infinity(), DType::F64);
  CHECK_THROWS_AS(recurrent_step(mp, st, bad), NumericError);
}

}  // TEST_SUITE
