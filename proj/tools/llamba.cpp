#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "llamba/bench.hpp"
#include "llamba/io.hpp"
#include "llamba/mohawk.hpp"

using namespace llamba;

namespace {

// exit codes: 0 ok, 1 unexpected, 2 bad input/config, 3 numeric failure,
// 4 NaN loss during distillation
constexpr int kExitOk = 0, kExitError = 1, kExitBadInput = 2, kExitNumeric = 3, kExitNanLoss = 4;

constexpr int kBos = 256;
constexpr int kEos = 257;

std::vector<int> encode_bytes(const std::string& text, bool with_bos = true) {
  std::vector<int> out;
  if (with_bos) out.push_back(kBos);
  for (unsigned char c : text) out.push_back(static_cast<int>(c));
  return out;
}

std::uint64_t effective_seed(std::uint64_t flag_seed) {
  if (const char* env = std::getenv("LLAMBA_SEED")) return std::strtoull(env, nullptr, 10);
  return flag_seed;
}

double cfg_num(const std::map<std::string, std::string>& kv, const std::string& key,
               double fallback) {
  auto it = kv.find(key);
  return it == kv.end() ? fallback : std::stod(it->second);
}

std::vector<long> parse_longs(const std::string& csv) {
  std::vector<long> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stol(item));
  if (out.empty()) throw ConfigError("empty list: " + csv);
  return out;
}

int cmd_generate(const std::string& model_path, const std::string& prompt, int max_tokens,
                 double temp, std::uint64_t seed, bool verify) {
  Model m;
  try {
    m = load_model(model_path);
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadInput;
  }
  std::mt19937_64 rng(effective_seed(seed));
  std::vector<int> tokens = encode_bytes(prompt);
  for (auto& t : tokens)
    if (t >= m.cfg.vocab) t = t % m.cfg.vocab;  // models with tiny vocabs stay usable

  ModelState state = init_model_state(m);
  Tensor logits;
  try {
    for (std::size_t i = 0; i < tokens.size(); ++i) logits = decode(m, state, tokens[i]);
    if (verify) {
      StudentForward fw = student_forward(m, tokens);
      for (std::size_t j = 0; j < logits.size(); ++j) {
        double ref = fw.logits.at(tokens.size() - 1, j);
        if (std::abs(logits.get(j) - ref) > 1e-4 * (std::abs(ref) + 1.0)) {
          std::cerr << "verify: decode/prefill logit mismatch at index " << j << "\n";
          return kExitNumeric;
        }
      }
      std::cerr << "verify: decode matches prefill\n";
    }
    std::string out;
    for (int i = 0; i < max_tokens; ++i) {
      int tok = sample_token(logits, temp, rng);
      if (tok == kEos) break;
      if (tok < 256) out.push_back(static_cast<char>(tok));
      logits = decode(m, state, tok);
    }
    std::cout << out << "\n";
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitOk;
}

int run_one_stage(int stage, const std::map<std::string, std::string>& cfg,
                  const Teacher& teacher, Model& student, AdamW& opt, const Corpus& corpus,
                  const std::string& out_base, bool transferred_before) {
  std::string sfx = std::to_string(stage);
  long total_tokens = static_cast<long>(cfg_num(cfg, "total_tokens", 80000));
  long budget = stage_token_split(total_tokens)[stage - 1];
  budget = static_cast<long>(cfg_num(cfg, "tokens" + sfx, static_cast<double>(budget)));
  int seq_len = static_cast<int>(cfg_num(cfg, "seq_len", 32));
  StagePlan plan = default_plan(stage, budget, seq_len);
  plan.batch_size = static_cast<int>(cfg_num(cfg, "batch" + sfx, plan.batch_size));
  plan.peak_lr = cfg_num(cfg, "peak_lr" + sfx, plan.peak_lr);

  StageRunOptions opts;
  opts.do_transfer = !transferred_before;
  StageReport rep = run_stage(plan, teacher, student, corpus, opt, opts);
  write_report_csv(rep, out_base + ".stage" + sfx + ".csv");
  std::cerr << "stage " << stage << ": " << rep.steps.size() << " steps, loss "
            << rep.initial_loss << " -> " << rep.final_loss << "\n";
  return kExitOk;
}

int cmd_distill(const std::string& config_path, const std::string& stage_arg,
                const std::string& teacher_path, const std::string& init_path,
                const std::string& out_path) {
  std::map<std::string, std::string> cfg;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) {
      std::cerr << "error: cannot open config: " << config_path << "\n";
      return kExitBadInput;
    }
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    cfg = parse_kv_text(text);
  }
  Teacher teacher = load_teacher(teacher_path);

  Model student;
  AdamW opt;
  int start_stage = stage_arg == "all" ? 1 : std::stoi(stage_arg);
  int end_stage = stage_arg == "all" ? 3 : start_stage;
  if (!init_path.empty()) {
    Checkpoint ck = load_checkpoint(init_path);
    student = std::move(ck.model);
    opt = std::move(ck.opt);
  } else {
    if (start_stage >= 2)
      std::cerr << "warning: --stage " << stage_arg
                << " without an earlier-stage checkpoint; proceeding from identity init\n";
    std::uint64_t seed = effective_seed(static_cast<std::uint64_t>(cfg_num(cfg, "seed", 0)));
    student = init_student(teacher.cfg, seed);
  }
  Corpus corpus(static_cast<std::uint64_t>(cfg_num(cfg, "corpus_seed", 1234)));

  for (int stage = start_stage; stage <= end_stage; ++stage) {
    // fresh optimizer state per stage; the trained parameter set changes
    if (stage != start_stage || init_path.empty()) opt = AdamW{};
    run_one_stage(stage, cfg, teacher, student, opt, corpus, out_path, false);
  }
  save_checkpoint({student, opt, end_stage, 0}, out_path);
  return kExitOk;
}

int cmd_quantize(const std::string& model_path, int bits, int group,
                 const std::string& out_path) {
  if (bits != 4) {
    std::cerr << "error: only --bits 4 is supported\n";
    return kExitBadInput;
  }
  if (group != static_cast<int>(kLmbaGroupSize)) {
    std::cerr << "error: the file format fixes --group at " << kLmbaGroupSize << "\n";
    return kExitBadInput;
  }
  ModelBundle in = load_bundle(model_path);
  ModelBundle out = quantize_model_bundle(in);
  save_bundle(out, out_path);
  std::cerr << "quantized " << out.qtensors.size() << " tensors; " << file_size(model_path)
            << " -> " << file_size(out_path) << " bytes\n";
  return kExitOk;
}

int cmd_bench(const std::string& model_path, const std::string& baseline,
              const std::string& contexts, const std::string& batches, int measure_tokens,
              std::size_t mem_budget, const std::string& out_path) {
  BenchOptions opt;
  opt.contexts = parse_longs(contexts);
  opt.batches.clear();
  for (long b : parse_longs(batches)) opt.batches.push_back(static_cast<int>(b));
  opt.measure_tokens = measure_tokens;
  opt.mem_budget = mem_budget;

  Model m = load_model(model_path);
  std::vector<BenchReport> reports{bench_student(m, opt)};
  if (baseline == "attention-toy") {
    Teacher t = init_teacher(m.cfg, 0, m.embed.dtype());
    reports.push_back(bench_teacher(t, opt));
  } else if (!baseline.empty()) {
    std::cerr << "error: unknown baseline '" << baseline << "'\n";
    return kExitBadInput;
  }
  if (out_path.empty())
    std::cout << render_bench_csv(reports);
  else
    write_bench_csv(reports, out_path);
  return kExitOk;
}

int cmd_init(const std::string& kind, const std::string& out_path, int n_blocks, int d_model,
             int n_heads, int head_dim, int state_dim, int mlp_hidden, int vocab,
             std::uint64_t seed, const std::string& dtype) {
  LlambaConfig cfg;
  cfg.n_blocks = n_blocks;
  cfg.d_model = d_model;
  cfg.n_heads = n_heads;
  cfg.head_dim = head_dim;
  cfg.state_dim = state_dim;
  cfg.mlp_hidden = mlp_hidden;
  cfg.vocab = vocab;
  DType dt = dtype == "f32" ? DType::F32 : DType::F64;
  std::uint64_t s = effective_seed(seed);
  if (kind == "teacher")
    save_teacher(init_teacher(cfg, s, dt), out_path);
  else
    save_model(init_student(cfg, s, dt), out_path);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"llamba: discrete-Mamba-2 runtime and MOHAWK distillation pipeline"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "sample tokens from a model file");
  std::string gen_model, gen_prompt;
  int gen_max = 64;
  double gen_temp = 0.0;
  std::uint64_t gen_seed = 0;
  bool gen_verify = false;
  gen->add_option("--model", gen_model)->required();
  gen->add_option("--prompt", gen_prompt);
  gen->add_option("--max-tokens", gen_max);
  gen->add_option("--temp", gen_temp);
  gen->add_option("--seed", gen_seed);
  gen->add_flag("--verify", gen_verify, "check decode logits against full-sequence prefill");

  // distill
  auto* dis = app.add_subcommand("distill", "run MOHAWK distillation stages");
  std::string dis_config, dis_stage = "all", dis_teacher, dis_init, dis_out;
  dis->add_option("--config", dis_config, "key=value training config");
  dis->add_option("--stage", dis_stage)->check(CLI::IsMember({"1", "2", "3", "all"}));
  dis->add_option("--teacher", dis_teacher)->required();
  dis->add_option("--init", dis_init, "checkpoint from an earlier stage");
  dis->add_option("--out", dis_out)->required();

  // quantize
  auto* qnt = app.add_subcommand("quantize", "4-bit group quantization of a model file");
  std::string qnt_model, qnt_out;
  int qnt_bits = 4, qnt_group = 32;
  qnt->add_option("--model", qnt_model)->required();
  qnt->add_option("--bits", qnt_bits);
  qnt->add_option("--group", qnt_group);
  qnt->add_option("--out", qnt_out)->required();

  // bench
  auto* bch = app.add_subcommand("bench", "decode throughput/memory grid");
  std::string bch_model, bch_baseline = "attention-toy", bch_out;
  std::string bch_contexts = "64,256,1024,4096", bch_batches = "1,8,32";
  int bch_measure = 32;
  std::size_t bch_budget = 0;
  bch->add_option("--model", bch_model)->required();
  bch->add_option("--baseline", bch_baseline,
                  "'attention-toy' (KV-cache teacher at the model's config) or '' to skip");
  bch->add_option("--contexts", bch_contexts);
  bch->add_option("--batches", bch_batches);
  bch->add_option("--measure-tokens", bch_measure);
  bch->add_option("--mem-budget", bch_budget, "bytes; cells above it report OOM");
  bch->add_option("--out", bch_out, "CSV path (default stdout)");

  // init
  auto* ini = app.add_subcommand("init", "create a fresh model or teacher file");
  std::string ini_kind = "student", ini_out, ini_dtype = "f64";
  int ini_blocks = 2, ini_d = 32, ini_heads = 2, ini_hd = 16, ini_sd = 16, ini_mlp = 64,
      ini_vocab = 258;
  std::uint64_t ini_seed = 0;
  ini->add_option("--kind", ini_kind)->check(CLI::IsMember({"student", "teacher"}));
  ini->add_option("--out", ini_out)->required();
  ini->add_option("--blocks", ini_blocks);
  ini->add_option("--d-model", ini_d);
  ini->add_option("--heads", ini_heads);
  ini->add_option("--head-dim", ini_hd);
  ini->add_option("--state-dim", ini_sd);
  ini->add_option("--mlp-hidden", ini_mlp);
  ini->add_option("--vocab", ini_vocab);
  ini->add_option("--seed", ini_seed);
  ini->add_option("--dtype", ini_dtype)->check(CLI::IsMember({"f32", "f64"}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen)
      return cmd_generate(gen_model, gen_prompt, gen_max, gen_temp, gen_seed, gen_verify);
    if (*dis) return cmd_distill(dis_config, dis_stage, dis_teacher, dis_init, dis_out);
    if (*qnt) return cmd_quantize(qnt_model, qnt_bits, qnt_group, qnt_out);
    if (*bch)
      return cmd_bench(bch_model, bch_baseline, bch_contexts, bch_batches, bch_measure,
                       bch_budget, bch_out);
    if (*ini)
      return cmd_init(ini_kind, ini_out, ini_blocks, ini_d, ini_heads, ini_hd, ini_sd, ini_mlp,
                      ini_vocab, ini_seed, ini_dtype);
  } catch (const NanLossError& e) {
    std::cerr << "error: NaN loss at step " << e.step << "\n";
    return kExitNanLoss;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadInput;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadInput;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitOk;
}
