#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "llamba/autodiff.hpp"

using namespace llamba;
using llamba::testing::fd_max_rel_error;
using llamba::testing::randn;

namespace {

// Runs the analytic backward once, then compares every input gradient
// against central differences of the rebuilt forward.
void check_op(const std::function<NodeId(Tape&, const std::vector<NodeId>&)>& build,
              std::vector<Tensor> inputs, double tol = 1e-6) {
  Tape tape;
  std::vector<NodeId> ids;
  for (auto& t : inputs) ids.push_back(tape.leaf(t, true));
  NodeId loss = build(tape, ids);
  REQUIRE(tape.value(loss).size() == 1);
  GradMap g = tape.backward(loss);
  std::vector<Tensor> analytic;
  for (NodeId id : ids) analytic.push_back(g.at(id));

  auto f = [&](const std::vector<Tensor>& xs) {
    Tape t2;
    std::vector<NodeId> ids2;
    for (const auto& x : xs) ids2.push_back(t2.leaf(x, false));
    return t2.value(build(t2, ids2)).get(0);
  };
  CHECK(fd_max_rel_error(f, inputs, analytic) < tol);
}

}  // namespace

TEST_SUITE("autodiff") {

TEST_CASE("forward values match plain kernels") {
  Tensor a = randn({3, 4}, 1), b = randn({4, 2}, 2);
  Tape tape;
  NodeId na = tape.leaf(a, true), nb = tape.leaf(b, true);
  CHECK(max_abs_diff(tape.value(tape.matmul(na, nb)), matmul(a, b)) == 0.0);
  CHECK(max_abs_diff(tape.value(tape.silu(na)), silu(a)) == 0.0);
  CHECK(tape.value(tape.sum(na)).get(0) == sum(a));
}

TEST_CASE("gradcheck: add, mul, scale") {
  check_op([](Tape& t, const std::vector<NodeId>& in) {
    return t.sum(t.mul(t.add(in[0], in[1]), t.scale(in[0], 0.3)));
  }, {randn({3, 3}, 10), randn({3, 3}, 11)});
}

TEST_CASE("gradcheck: matmul chain") {
  check_op([](Tape& t, const std::vector<NodeId>& in) {
    return t.sum(t.matmul(in[0], t.matmul(in[1], in[2])));
  }, {randn({2, 3}, 20), randn({3, 4}, 21), randn({4, 2}, 22)});
}

TEST_CASE("gradcheck: silu, sigmoid, exp") {
  check_op([](Tape& t, const std::vector<NodeId>& in) {
    return t.sum(t.silu(t.exp(t.scale(t.sigmoid(in[0]), 0.7))));
  }, {randn({4, 4}, 30)});
}

TEST_CASE("gradcheck: mean, reshape, transpose") {
  check_op([](Tape& t, const std::vector<NodeId>& in) {
    return t.mean(t.mul(t.transpose(t.reshape(in[0], {4, 2})), in[1]));
  }, {randn({2, 4}, 40), randn({2, 4}, 41)});
}

TEST_CASE("gradcheck: broadcasts") {
  check_op([](Tape& t, const std::vector<NodeId>& in) {
    NodeId rows = t.broadcast_rows(in[0], 3);
    NodeId fill = t.broadcast_full(in[1], {3, 5});
    return t.sum(t.mul(t.add(rows, fill), in[2]));
  }, {randn({5}, 50), Tensor::scalar(0.37), randn({3, 5}, 51)});
}

TEST_CASE("gradcheck: softmax rows, plain and causal") {
  check_op([](Tape& t, const std::vector<NodeId>& in) {
    return t.sum(t.mul(t.softmax_rows(in[0], false), in[1]));
  }, {randn({3, 4}, 60), randn({3, 4}, 61)});
  check_op([](Tape& t, const std::vector<NodeId>& in) {
    return t.sum(t.mul(t.softmax_rows(in[0], true), in[1]));
  }, {randn({4, 4}, 62), randn({4, 4}, 63)});
}

TEST_CASE("gradcheck: rmsnorm wrt x and weight") {
  check_op([](Tape& t, const std::vector<NodeId>& in) {
    return t.sum(t.mul(t.rmsnorm(in[0], in[1], 1e-5), in[2]));
  }, {randn({3, 6}, 70), randn({6}, 71), randn({3, 6}, 72)});
}

TEST_CASE("gradcheck: decay matrix through sigmoid") {
  check_op([](Tape& t, const std::vector<NodeId>& in) {
    return t.sum(t.mul(t.decay_matrix(t.sigmoid(in[0])), in[1]));
  }, {randn({5}, 80), randn({5, 5}, 81)}, 1e-5);
}

TEST_CASE("decay matrix forward values") {
  Tape tape;
  NodeId a = tape.leaf(Tensor::from({3}, {0.5, 0.25, 0.5}), false);
  const Tensor& m = tape.value(tape.decay_matrix(a));
  CHECK(m.at(0, 0) == 1.0);
  CHECK(m.at(1, 0) == 0.25);
  CHECK(m.at(2, 0) == 0.125);
  CHECK(m.at(2, 1) == 0.5);
  CHECK(m.at(0, 1) == 0.0);  // upper triangle untouched
  Tape t2;
  CHECK_THROWS_AS(t2.decay_matrix(t2.leaf(Tensor::from({2}, {0.5, 0.0}), false)), ConfigError);
}

TEST_CASE("gradcheck: gather rows") {
  check_op([](Tape& t, const std::vector<NodeId>& in) {
    return t.sum(t.mul(t.gather_rows(in[0], {2, 0, 2, 1}), in[1]));
  }, {randn({3, 4}, 90), randn({4, 4}, 91)});
}

TEST_CASE("gradcheck: cross entropy vs constant teacher") {
  Tensor probs = softmax_rows(randn({3, 5}, 101), false);
  check_op([&](Tape& t, const std::vector<NodeId>& in) {
    return t.cross_entropy(in[0], t.constant(probs));
  }, {randn({3, 5}, 100)});

  Tape tape;
  NodeId logits = tape.leaf(randn({3, 5}, 100), true);
  NodeId bad = tape.leaf(probs, true);
  CHECK_THROWS_AS(tape.cross_entropy(logits, bad), ConfigError);
}

TEST_CASE("cross entropy hand value") {
  // uniform teacher, uniform logits: loss = log(V)
  Tape tape;
  NodeId logits = tape.leaf(Tensor::zeros({2, 4}, DType::F64), true);
  NodeId probs = tape.constant(Tensor::full({2, 4}, 0.25, DType::F64));
  CHECK(tape.value(tape.cross_entropy(logits, probs)).get(0) ==
        doctest::Approx(std::log(4.0)));
}

TEST_CASE("gradcheck: causal conv wrt signal and kernels") {
  check_op([](Tape& t, const std::vector<NodeId>& in) {
    return t.sum(t.mul(t.causal_conv(in[0], in[1]), in[2]));
  }, {randn({5, 3}, 110), randn({3, 4}, 111), randn({5, 3}, 112)});
}

TEST_CASE("causal conv identity kernel is a no-op") {
  Tensor x = randn({6, 2}, 120);
  Tensor k = Tensor::from({2, 4}, {0, 0, 0, 1, 0, 0, 0, 1});
  Tape tape;
  NodeId out = tape.causal_conv(tape.leaf(x, false), tape.leaf(k, false));
  CHECK(max_abs_diff(tape.value(out), x) == 0.0);
}

TEST_CASE("backward: linearity in the upstream seed") {
  // grad of c*f is c*grad of f
  Tensor x = randn({3, 3}, 130);
  auto grad_of = [&](double c) {
    Tape t;
    NodeId in = t.leaf(x, true);
    GradMap g = t.backward(t.scale(t.sum(t.silu(in)), c));
    return g.at(in);
  };
  Tensor g1 = grad_of(1.0), g3 = grad_of(3.0);
  CHECK(max_abs_diff(scale(g1, 3.0), g3) < 1e-12);
}

TEST_CASE("backward: unreachable trainable leaf gets a zero gradient") {
  Tape tape;
  NodeId used = tape.leaf(randn({2, 2}, 140), true);
  NodeId unused = tape.leaf(randn({2, 2}, 141), true);
  GradMap g = tape.backward(tape.sum(used));
  CHECK(sum(g.at(unused)) == 0.0);
  CHECK(g.at(unused).same_shape(tape.value(unused)));
}

TEST_CASE("backward requires a scalar loss") {
  Tape tape;
  NodeId x = tape.leaf(randn({2, 2}, 150), true);
  CHECK_THROWS_AS(tape.backward(x), DimensionError);
}

TEST_CASE("backward is deterministic") {
  auto run = [] {
    Tape t;
    NodeId a = t.leaf(randn({4, 4}, 160), true);
    NodeId b = t.leaf(randn({4, 4}, 161), true);
    GradMap g = t.backward(t.sum(t.matmul(t.silu(a), t.sigmoid(b))));
    return std::pair{g.at(a), g.at(b)};
  };
  auto [a1, b1] = run();
  auto [a2, b2] = run();
  CHECK(max_abs_diff(a1, a2) == 0.0);
  CHECK(max_abs_diff(b1, b2) == 0.0);
}

TEST_CASE("record: generic entry point dispatches and rejects") {
  Tape tape;
  NodeId a = tape.leaf(randn({2, 2}, 170), false);
  NodeId b = tape.leaf(randn({2, 2}, 171), false);
  NodeId s = tape.record(Op::Add, {a, b});
  CHECK(max_abs_diff(tape.value(s), add(tape.value(a), tape.value(b))) == 0.0);
  CHECK_THROWS_AS(tape.record(Op::RmsNorm, {a, b}), ConfigError);
}

}  // TEST_SUITE
