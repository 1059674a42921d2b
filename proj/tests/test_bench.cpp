#include <doctest.h>

#include <sstream>

#include "helpers.hpp"
#include "llamba/bench.hpp"

using namespace llamba;

namespace {

LlambaConfig toy_cfg() {
  LlambaConfig c;
  c.n_blocks = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.head_dim = 4;
  c.state_dim = 4;
  c.mlp_hidden = 16;
  c.vocab = 64;
  return c;
}

}  // namespace

TEST_SUITE("bench") {

TEST_CASE("student state bytes are constant across context lengths") {
  Model m = init_student(toy_cfg(), 1);
  BenchOptions opt;
  opt.contexts = {64, 512};
  opt.batches = {1, 2};
  opt.measure_tokens = 4;
  BenchReport rep = bench_student(m, opt);
  REQUIRE(rep.cells.size() == 4);
  // same batch, different context -> identical state bytes
  CHECK(rep.cells[0].state_bytes == rep.cells[2].state_bytes);
  CHECK(rep.cells[1].state_bytes == rep.cells[3].state_bytes);
  // doubling the batch doubles the state
  CHECK(rep.cells[1].state_bytes == 2 * rep.cells[0].state_bytes);
  for (const auto& c : rep.cells) {
    CHECK(c.tokens_per_sec > 0.0);
    CHECK(c.state_bytes == c.analytic_bytes);
  }
}

TEST_CASE("baseline KV bytes grow linearly and match the analytic formula") {
  Teacher t = init_teacher(toy_cfg(), 2);
  BenchOptions opt;
  opt.contexts = {128, 4096};
  opt.batches = {1};
  opt.measure_tokens = 4;
  BenchReport rep = bench_teacher(t, opt);
  REQUIRE(rep.cells.size() == 2);
  double ratio = static_cast<double>(rep.cells[1].state_bytes) / rep.cells[0].state_bytes;
  CHECK(ratio == doctest::Approx(32.0).epsilon(0.05));
  for (const auto& c : rep.cells) {
    std::size_t analytic = kv_bytes_analytic(t, c.context) * c.batch;
    CHECK(std::abs(static_cast<double>(c.state_bytes) - static_cast<double>(analytic)) <=
          0.05 * analytic);
  }
}

TEST_CASE("cells over the memory budget carry the OOM sentinel") {
  Teacher t = init_teacher(toy_cfg(), 3);
  BenchOptions opt;
  opt.contexts = {64, 1 << 20};
  opt.batches = {1};
  opt.measure_tokens = 2;
  opt.mem_budget = 1 << 20;
  BenchReport rep = bench_teacher(t, opt);
  REQUIRE(rep.cells.size() == 2);
  CHECK_FALSE(rep.cells[0].oom);
  CHECK(rep.cells[1].oom);
  std::string csv = render_bench_csv({rep});
  CHECK(csv.find("OOM") != std::string::npos);
}

TEST_CASE("csv parses back losslessly") {
  Model m = init_student(toy_cfg(), 4);
  BenchOptions opt;
  opt.contexts = {64};
  opt.batches = {1};
  opt.measure_tokens = 2;
  std::string csv = render_bench_csv({bench_student(m, opt)});
  std::istringstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header == "model,context,batch,tokens_per_sec,state_bytes,analytic_bytes,rss_bytes");
  std::string row;
  std::getline(in, row);
  int commas = 0;
  for (char c : row)
    if (c == ',') ++commas;
  CHECK(commas == 6);
  CHECK(row.substr(0, 10) == "recurrent,");
}

TEST_CASE("peak rss is nonzero and monotone") {
  std::size_t a = peak_rss_bytes();
  CHECK(a > 0);
  std::vector<double> sink(1 << 20, 1.0);
  CHECK(peak_rss_bytes() >= a);
  CHECK(sink[123] == 1.0);
}

}  // TEST_SUITE
