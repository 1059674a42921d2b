#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "helpers.hpp"
#include "llamba/io.hpp"

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
  c.vocab = 258;
  return c;
}

std::string tmp_path(const std::string& name) { return "/tmp/llamba_io_" + name + ".lmba"; }

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

bool tensors_bitequal(Model& a, Model& b) {
  auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].name != pb[i].name) return false;
    if (pa[i].tensor->dtype() != pb[i].tensor->dtype()) return false;
    for (std::size_t j = 0; j < pa[i].tensor->size(); ++j)
      if (pa[i].tensor->get(j) != pb[i].tensor->get(j)) return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("io") {

TEST_CASE("kv header text round trips") {
  std::map<std::string, std::string> kv{{"a", "1"}, {"zz", "hello world"}, {"m", ""}};
  CHECK(parse_kv_text(render_kv_text(kv)) == kv);
  CHECK_THROWS_AS(parse_kv_text("no-equals-sign\n"), FormatError);
  CHECK_THROWS_AS(render_kv_text({{"bad=key", "v"}}), FormatError);
}

TEST_CASE("model round trip is bit-exact for f64 and f32") {
  for (DType dt : {DType::F64, DType::F32}) {
    Model m = init_student(toy_cfg(), 42, dt);
    std::string path = tmp_path(dtype_name(dt));
    save_model(m, path);
    Model back = load_model(path);
    CHECK(back.cfg.d_model == m.cfg.d_model);
    CHECK(back.cfg.vocab == m.cfg.vocab);
    CHECK(tensors_bitequal(m, back));
  }
}

TEST_CASE("teacher round trip") {
  Teacher t = init_teacher(toy_cfg(), 43);
  std::string path = tmp_path("teacher");
  save_teacher(t, path);
  Teacher back = load_teacher(path);
  CHECK(max_abs_diff(back.embed, t.embed) == 0.0);
  CHECK(max_abs_diff(back.blocks[1].attn.W_q[1], t.blocks[1].attn.W_q[1]) == 0.0);
  CHECK_THROWS_AS(load_model(path), FormatError);  // kind mismatch
}

TEST_CASE("two saves of the same model are byte-identical") {
  Model m = init_student(toy_cfg(), 44);
  save_model(m, tmp_path("det1"));
  save_model(m, tmp_path("det2"));
  CHECK(slurp(tmp_path("det1")) == slurp(tmp_path("det2")));
}

TEST_CASE("quantized bundle round trip preserves packed nibbles exactly") {
  Model m = init_student(toy_cfg(), 45, DType::F32);
  ModelBundle q = quantize_model_bundle(to_bundle(m));
  CHECK(q.quantized());
  CHECK(!q.qtensors.empty());
  CHECK(q.tensors.count("embed") == 1);          // embeddings stay float
  CHECK(q.tensors.count("blocks.0.norm1") == 1);  // norms stay float
  std::string path = tmp_path("quant");
  save_bundle(q, path);
  ModelBundle back = load_bundle(path);
  REQUIRE(back.qtensors.size() == q.qtensors.size());
  for (const auto& [name, qt] : q.qtensors) {
    const QuantTensor& bt = back.qtensors.at(name);
    CHECK(bt.codes == qt.codes);
    CHECK(bt.zeros == qt.zeros);
    CHECK(bt.scales == qt.scales);
  }
  Model dq = model_from_bundle(back);  // dequantizes into a usable model
  CHECK(dq.cfg.d_model == m.cfg.d_model);

  CHECK_THROWS_AS(quantize_model_bundle(back), ConfigError);  // idempotence guard
}

TEST_CASE("corrupted magic is rejected") {
  Model m = init_student(toy_cfg(), 46);
  std::string path = tmp_path("magic");
  save_model(m, path);
  std::string bytes = slurp(path);
  bytes[0] = 'X';
  spit(path, bytes);
  CHECK_THROWS_WITH_AS(load_bundle(path), doctest::Contains("magic"), FormatError);
}

TEST_CASE("version mismatch is a distinct error") {
  Model m = init_student(toy_cfg(), 47);
  std::string path = tmp_path("version");
  save_model(m, path);
  std::string bytes = slurp(path);
  bytes[4] = 99;
  spit(path, bytes);
  CHECK_THROWS_WITH_AS(load_bundle(path), doctest::Contains("version"), FormatError);
}

TEST_CASE("truncating the last payload byte names the offending tensor") {
  Model m = init_student(toy_cfg(), 48);
  std::string path = tmp_path("trunc");
  save_model(m, path);
  std::string bytes = slurp(path);
  spit(path, bytes.substr(0, bytes.size() - 1));
  CHECK_THROWS_WITH_AS(load_bundle(path), doctest::Contains("truncated payload for tensor"),
                       FormatError);
}

TEST_CASE("unknown dtype tag is rejected by name") {
  Model m = init_student(toy_cfg(), 49);
  std::string path = tmp_path("dtype");
  save_model(m, path);
  std::string bytes = slurp(path);
  // first table entry starts after magic+version+header_len+header+count;
  // its dtype tag sits right after the name. Find the name "blocks.0.mixer.0.D"
  // is fragile; instead corrupt via a search for the first name, "embed" is
  // not first alphabetically... locate "blocks.0.mlp.W_down" too brittle —
  // simplest robust route: find the byte after the first stored name.
  std::size_t header_len = 0;
  for (int i = 0; i < 8; ++i)
    header_len |= static_cast<std::size_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  std::size_t p = 16 + header_len + 4;  // first table entry
  std::size_t name_len = 0;
  for (int i = 0; i < 4; ++i)
    name_len |= static_cast<std::size_t>(static_cast<unsigned char>(bytes[p + i])) << (8 * i);
  bytes[p + 4 + name_len] = 7;  // dtype tag byte
  spit(path, bytes);
  CHECK_THROWS_WITH_AS(load_bundle(path), doctest::Contains("unknown dtype tag"), FormatError);
}

TEST_CASE("trailing garbage is rejected") {
  Model m = init_student(toy_cfg(), 50);
  std::string path = tmp_path("trailing");
  save_model(m, path);
  std::string bytes = slurp(path) + std::string(16, '\0');
  spit(path, bytes);
  CHECK_THROWS_WITH_AS(load_bundle(path), doctest::Contains("trailing garbage"), FormatError);
}

TEST_CASE("checkpoint round trip restores optimizer state") {
  LlambaConfig cfg = toy_cfg();
  Teacher teacher = init_teacher(cfg, 51);
  Model student = init_student(cfg, 52);
  Corpus corpus(53);
  StagePlan plan = default_plan(1, 2 * 4 * 4);
  plan.batch_size = 2;
  plan.seq_len = 4;
  AdamW opt;
  StageRunOptions head;
  head.end_step = 2;
  run_stage(plan, teacher, student, corpus, opt, head);

  Checkpoint ck{student, opt, 1, 2};
  std::string path = tmp_path("ckpt");
  save_checkpoint(ck, path);
  Checkpoint back = load_checkpoint(path);
  CHECK(back.stage == 1);
  CHECK(back.next_step == 2);
  CHECK(back.opt.step_count == opt.step_count);
  REQUIRE(back.opt.m.size() == opt.m.size());
  for (const auto& [name, t] : opt.m) CHECK(max_abs_diff(back.opt.m.at(name), t) == 0.0);
  CHECK(tensors_bitequal(student, back.model));
}

TEST_CASE("resume-equivalence: split training matches an uninterrupted run bit-exactly") {
  LlambaConfig cfg = toy_cfg();
  Teacher teacher = init_teacher(cfg, 54);
  Corpus corpus(55);
  StagePlan plan = default_plan(1, 2 * 4 * 6);  // 6 steps total
  plan.batch_size = 2;
  plan.seq_len = 4;
  plan.peak_lr = 1e-3;

  Model straight = init_student(cfg, 56);
  AdamW opt_straight;
  run_stage(plan, teacher, straight, corpus, opt_straight);

  Model split_m = init_student(cfg, 56);
  AdamW opt_split;
  StageRunOptions first;
  first.end_step = 3;
  run_stage(plan, teacher, split_m, corpus, opt_split, first);
  save_checkpoint({split_m, opt_split, 1, 3}, tmp_path("resume"));

  Checkpoint resumed = load_checkpoint(tmp_path("resume"));
  StageRunOptions second;
  second.start_step = resumed.next_step;
  run_stage(plan, teacher, resumed.model, corpus, resumed.opt, second);

  CHECK(tensors_bitequal(straight, resumed.model));
}

}  // TEST_SUITE
