#include "llamba/mohawk.hpp"

#include <cmath>
#include <fstream>

namespace llamba {

long StagePlan::total_steps() const {
  long denom = static_cast<long>(batch_size) * seq_len;
  if (denom <= 0) throw ConfigError("stage plan: batch_size and seq_len must be positive");
  return token_budget / denom;
}

StagePlan default_plan(int stage, long token_budget, int seq_len) {
  if (stage < 1 || stage > 3) throw ConfigError("stage must be 1, 2 or 3");
  StagePlan p;
  p.stage = stage;
  p.token_budget = token_budget;
  p.seq_len = seq_len;
  p.batch_size = stage == 1 ? 64 : 128;
  p.peak_lr = stage == 3 ? 5e-5 : 1e-4;
  return p;
}

std::vector<long> stage_token_split(long total_tokens) {
  // 300M : 2.7B : 5B
  long s1 = total_tokens * 3 / 80;
  long s2 = total_tokens * 27 / 80;
  return {s1, s2, total_tokens - s1 - s2};
}

double wsd_lr(long step, long total_steps, const StagePlan& plan) {
  if (plan.warmup_frac + plan.decay_frac > 1.0)
    throw ConfigError("wsd_lr: warmup_frac + decay_frac must not exceed 1");
  if (step < 0 || step >= total_steps)
    throw ConfigError("wsd_lr: step " + std::to_string(step) + " outside [0, " +
                      std::to_string(total_steps) + ")");
  long warm = std::lround(plan.warmup_frac * static_cast<double>(total_steps));
  long decay = std::lround(plan.decay_frac * static_cast<double>(total_steps));
  if (warm > 0 && step < warm)
    return plan.peak_lr * static_cast<double>(step) / static_cast<double>(warm);
  long decay_start = total_steps - 1 - decay;  // last step held at peak
  if (decay > 0 && step > decay_start)
    // written so that lr(total_steps - 1) == min_lr exactly
    return plan.min_lr + (plan.peak_lr - plan.min_lr) *
                             (1.0 - static_cast<double>(step - decay_start) /
                                        static_cast<double>(decay));
  return plan.peak_lr;
}

void AdamW::step(const std::vector<NamedParam>& params,
                 const std::map<std::string, Tensor>& grads, double lr) {
  if (lr < 0.0) throw ConfigError("adamw: lr must be >= 0");
  step_count += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_count));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_count));
  for (const auto& p : params) {
    auto it = grads.find(p.name);
    if (it == grads.end()) continue;
    const Tensor& g = it->second;
    Tensor& w = *p.tensor;
    if (!g.same_shape(w))
      throw DimensionError("adamw: gradient shape " + g.shape_str() + " does not match '" +
                           p.name + "' " + w.shape_str());
    auto mit = m.find(p.name);
    if (mit == m.end()) {
      m.emplace(p.name, Tensor::zeros(w.shape(), w.dtype()));
      v.emplace(p.name, Tensor::zeros(w.shape(), w.dtype()));
    }
    Tensor& mt = m.at(p.name);
    Tensor& vt = v.at(p.name);
    for (std::size_t i = 0; i < w.size(); ++i) {
      double gi = g.get(i);
      double mi = cfg.beta1 * mt.get(i) + (1.0 - cfg.beta1) * gi;
      double vi = cfg.beta2 * vt.get(i) + (1.0 - cfg.beta2) * gi * gi;
      mt.set(i, mi);
      vt.set(i, vi);
      double mhat = mi / bc1;
      double vhat = vi / bc2;
      double wi = w.get(i);
      w.set(i, wi - lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * wi));
    }
  }
}

// --- losses -------------------------------------------------------------

double matrix_orientation_loss(const Tensor& student_m, const Tensor& teacher_a) {
  if (student_m.rank() != 3 || teacher_a.rank() != 3)
    throw DimensionError("matrix_orientation_loss: inputs must be [H x T x T]");
  if (student_m.shape()[0] != teacher_a.shape()[0])
    throw ConfigError("matrix_orientation_loss: head count mismatch, student " +
                      std::to_string(student_m.shape()[0]) + " vs teacher " +
                      std::to_string(teacher_a.shape()[0]));
  if (!student_m.same_shape(teacher_a))
    throw DimensionError("matrix_orientation_loss: shape mismatch " + student_m.shape_str() +
                         " vs " + teacher_a.shape_str());
  std::size_t h = student_m.shape()[0], t = student_m.shape()[1];
  double total = 0.0;
  for (std::size_t i = 0; i < student_m.size(); ++i) {
    double d = student_m.get(i) - teacher_a.get(i);
    total += d * d;
  }
  return total / (static_cast<double>(h) * static_cast<double>(t) * static_cast<double>(t));
}

double hidden_state_alignment_loss(const Tensor& student_out, const Tensor& teacher_out) {
  if (!student_out.same_shape(teacher_out))
    throw DimensionError("hidden_state_alignment_loss: shape mismatch " +
                         student_out.shape_str() + " vs " + teacher_out.shape_str());
  double total = 0.0;
  for (std::size_t i = 0; i < student_out.size(); ++i) {
    double d = student_out.get(i) - teacher_out.get(i);
    total += d * d;
  }
  return total / static_cast<double>(student_out.size());
}

double kd_loss(const Tensor& student_logits, const Tensor& teacher_logits) {
  if (!student_logits.same_shape(teacher_logits))
    throw DimensionError("kd_loss: shape mismatch " + student_logits.shape_str() + " vs " +
                         teacher_logits.shape_str());
  std::size_t t_len = student_logits.rows(), v = student_logits.cols();
  Tensor p = softmax_rows(teacher_logits, false);
  double loss = 0.0;
  for (std::size_t t = 0; t < t_len; ++t) {
    double mx = student_logits.at(t, 0);
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, student_logits.at(t, j));
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(student_logits.at(t, j) - mx);
    double lse = mx + std::log(z);
    for (std::size_t j = 0; j < v; ++j) loss += p.at(t, j) * (lse - student_logits.at(t, j));
  }
  return loss / static_cast<double>(t_len);
}

// --- weight transfer ------------------------------------------------------

namespace {

void copy_tensor(const Tensor& src, Tensor& dst, const std::string& name) {
  if (!src.same_shape(dst))
    throw ConfigError("transfer_weights: shape mismatch for '" + name + "': teacher " +
                      src.shape_str() + " vs student " + dst.shape_str());
  dst = src.cast(dst.dtype());
}

}  // namespace

void transfer_weights(const Teacher& teacher, Model& student) {
  if (teacher.cfg.d_model != student.cfg.d_model ||
      teacher.cfg.mlp_hidden != student.cfg.mlp_hidden ||
      teacher.cfg.vocab != student.cfg.vocab)
    throw ConfigError("transfer_weights: teacher/student must share d_model, mlp_hidden, vocab");
  if (teacher.blocks.size() != student.blocks.size())
    throw ConfigError("transfer_weights: block count mismatch");
  copy_tensor(teacher.embed, student.embed, "embed");
  copy_tensor(teacher.final_norm, student.final_norm, "final_norm");
  if (!student.cfg.tie_embeddings) copy_tensor(teacher.head, student.head, "head");
  for (std::size_t b = 0; b < student.blocks.size(); ++b) {
    std::string bp = "blocks." + std::to_string(b);
    copy_tensor(teacher.blocks[b].norm1, student.blocks[b].norm1, bp + ".norm1");
    copy_tensor(teacher.blocks[b].norm2, student.blocks[b].norm2, bp + ".norm2");
    copy_tensor(teacher.blocks[b].mlp.W_gate, student.blocks[b].mlp.W_gate, bp + ".mlp.W_gate");
    copy_tensor(teacher.blocks[b].mlp.W_up, student.blocks[b].mlp.W_up, bp + ".mlp.W_up");
    copy_tensor(teacher.blocks[b].mlp.W_down, student.blocks[b].mlp.W_down, bp + ".mlp.W_down");
  }
}

// --- corpus -----------------------------------------------------------------

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

Corpus::Corpus(std::uint64_t seed) : seed_(seed) {
  std::mt19937_64 rng(splitmix(seed));
  std::uniform_real_distribution<double> unif(0.1, 1.0);
  successors_.resize(kSymbols * kBranch);
  cumweights_.resize(kSymbols * kBranch);
  for (int s = 0; s < kSymbols; ++s) {
    double acc = 0.0;
    for (int b = 0; b < kBranch; ++b) {
      successors_[s * kBranch + b] = static_cast<int>(rng() % kSymbols);
      acc += unif(rng);
      cumweights_[s * kBranch + b] = acc;
    }
    for (int b = 0; b < kBranch; ++b) cumweights_[s * kBranch + b] /= acc;
  }
}

std::vector<int> Corpus::sequence(std::uint64_t index, int len, bool with_bos) const {
  if (len < 1) throw ConfigError("corpus: sequence length must be >= 1");
  std::mt19937_64 rng(splitmix(seed_ ^ splitmix(index)));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(len));
  int state = static_cast<int>(rng() % kSymbols);
  if (with_bos) out.push_back(kBosId);
  while (static_cast<int>(out.size()) < len) {
    out.push_back(state);
    double u = unif(rng);
    int next = successors_[state * kBranch + kBranch - 1];
    for (int b = 0; b < kBranch; ++b)
      if (u <= cumweights_[state * kBranch + b]) {
        next = successors_[state * kBranch + b];
        break;
      }
    state = next;
  }
  return out;
}

// --- tape builders ------------------------------------------------------------

bool stage_trains_param(int stage, const std::string& name) {
  if (stage == 3) return true;
  bool in_mixer = name.find(".mixer.") != std::string::npos;
  if (stage == 2) return in_mixer || name.ends_with(".norm1");
  // stage 1: the parameters the materialized mixer matrix depends on
  if (!in_mixer) return false;
  for (const char* leafname : {"W_B", "W_C", "conv_B", "conv_C", "w_a", "b_a"})
    if (name.ends_with(std::string(".") + leafname)) return true;
  return false;
}

namespace {

struct Binder {
  Tape& tape;
  int stage;
  std::map<std::string, NodeId>& ids;

  NodeId bind(const std::string& name, Tensor& t) {
    auto it = ids.find(name);
    if (it != ids.end()) return it->second;
    NodeId id = tape.leaf(t, stage_trains_param(stage, name));
    ids.emplace(name, id);
    return id;
  }
};

struct TapeMixer {
  std::vector<NodeId> heads_m;  // per-head materialized matrices
  NodeId out = -1;              // full mixer output (when requested)
};

TapeMixer tape_mixer(Binder& b, const std::string& prefix, MixerParams& p, NodeId x,
                     bool full) {
  Tape& tp = b.tape;
  std::size_t t_len = tp.value(x).rows();
  auto P = static_cast<std::size_t>(p.head_dim);
  TapeMixer r;
  for (int h = 0; h < p.n_heads; ++h) {
    std::string hp = prefix + "." + std::to_string(h) + ".";
    NodeId bm = tp.causal_conv(tp.matmul(x, b.bind(hp + "W_B", p.W_B[h])),
                               b.bind(hp + "conv_B", p.conv_B[h]));
    NodeId cm = tp.causal_conv(tp.matmul(x, b.bind(hp + "W_C", p.W_C[h])),
                               b.bind(hp + "conv_C", p.conv_C[h]));
    NodeId alog = tp.add(tp.matmul(x, b.bind(hp + "w_a", p.w_a[h])),
                         tp.broadcast_full(b.bind(hp + "b_a", p.b_a[h]), {t_len, 1}));
    NodeId a = tp.sigmoid(alog);
    NodeId m = tp.mul(tp.matmul(cm, tp.transpose(bm)), tp.decay_matrix(a));
    r.heads_m.push_back(m);
    if (!full) continue;
    NodeId xhat = tp.causal_conv(tp.matmul(x, b.bind(hp + "W_x", p.W_x[h])),
                                 b.bind(hp + "conv_x", p.conv_x[h]));
    NodeId skip = tp.mul(xhat, tp.broadcast_full(b.bind(hp + "D", p.D[h]), {t_len, P}));
    NodeId y = tp.add(tp.matmul(m, xhat), skip);
    NodeId z = tp.add(tp.matmul(x, b.bind(hp + "W_z", p.W_z[h])),
                      tp.broadcast_rows(b.bind(hp + "b_z", p.b_z[h]), t_len));
    NodeId oh = tp.matmul(tp.mul(y, tp.silu(z)), b.bind(hp + "W_out", p.W_out[h]));
    r.out = (r.out < 0) ? oh : tp.add(r.out, oh);
  }
  return r;
}

NodeId tape_mlp(Binder& b, const std::string& prefix, MlpParams& p, NodeId x) {
  Tape& tp = b.tape;
  NodeId g = tp.silu(tp.matmul(x, b.bind(prefix + ".W_gate", p.W_gate)));
  NodeId u = tp.matmul(x, b.bind(prefix + ".W_up", p.W_up));
  return tp.matmul(tp.mul(g, u), b.bind(prefix + ".W_down", p.W_down));
}

NodeId sq_frobenius(Tape& tp, NodeId a, NodeId b_const) {
  NodeId d = tp.add(a, tp.scale(b_const, -1.0));
  return tp.sum(tp.mul(d, d));
}

}  // namespace

NodeId build_stage_loss(Tape& tape, int stage, const Teacher& teacher, Model& student,
                        const std::vector<int>& tokens,
                        std::map<std::string, NodeId>* binder_out) {
  std::map<std::string, NodeId> local;
  std::map<std::string, NodeId>& ids = binder_out ? *binder_out : local;
  Binder b{tape, stage, ids};
  auto t_len = static_cast<double>(tokens.size());
  double eps = student.cfg.norm_eps;

  if (stage == 1 || stage == 2) {
    Capture cap;
    cap.hidden_states = true;
    cap.mixer_matrices = (stage == 1);
    TeacherForward tf = teacher_forward(teacher, tokens, cap);
    NodeId total = -1;
    for (std::size_t l = 0; l < student.blocks.size(); ++l) {
      LlambaBlock& blk = student.blocks[l];
      std::string bp = "blocks." + std::to_string(l);
      NodeId xc = tape.constant(tf.block_inputs.at(l));
      NodeId normed = tape.rmsnorm(xc, b.bind(bp + ".norm1", blk.norm1), eps);
      TapeMixer mx = tape_mixer(b, bp + ".mixer", blk.mixer, normed, stage == 2);
      NodeId layer_loss;
      if (stage == 1) {
        if (static_cast<int>(tf.attn_matrices.at(l).size()) != blk.mixer.n_heads)
          throw ConfigError("stage 1: head count mismatch, teacher " +
                            std::to_string(tf.attn_matrices[l].size()) + " vs student " +
                            std::to_string(blk.mixer.n_heads));
        NodeId acc = -1;
        for (int h = 0; h < blk.mixer.n_heads; ++h) {
          NodeId s = sq_frobenius(tape, mx.heads_m[h],
                                  tape.constant(tf.attn_matrices[l][h]));
          acc = (acc < 0) ? s : tape.add(acc, s);
        }
        layer_loss = tape.scale(acc, 1.0 / (blk.mixer.n_heads * t_len * t_len));
      } else {
        NodeId h1 = tape.add(xc, mx.out);
        NodeId s = sq_frobenius(tape, h1, tape.constant(tf.attn_outputs.at(l)));
        layer_loss = tape.scale(s, 1.0 / (t_len * student.cfg.d_model));
      }
      total = (total < 0) ? layer_loss : tape.add(total, layer_loss);
    }
    return total;
  }

  if (stage != 3) throw ConfigError("build_stage_loss: stage must be 1, 2 or 3");

  TeacherForward tf = teacher_forward(teacher, tokens, {});
  NodeId emb = b.bind("embed", student.embed);
  NodeId x = tape.gather_rows(emb, tokens);
  for (std::size_t l = 0; l < student.blocks.size(); ++l) {
    LlambaBlock& blk = student.blocks[l];
    std::string bp = "blocks." + std::to_string(l);
    NodeId normed = tape.rmsnorm(x, b.bind(bp + ".norm1", blk.norm1), eps);
    TapeMixer mx = tape_mixer(b, bp + ".mixer", blk.mixer, normed, true);
    NodeId h1 = tape.add(x, mx.out);
    NodeId u = tape.rmsnorm(h1, b.bind(bp + ".norm2", blk.norm2), eps);
    x = tape.add(h1, tape_mlp(b, bp + ".mlp", blk.mlp, u));
  }
  NodeId fin = tape.rmsnorm(x, b.bind("final_norm", student.final_norm), eps);
  NodeId logits = student.cfg.tie_embeddings
                      ? tape.matmul(fin, tape.transpose(emb))
                      : tape.matmul(fin, b.bind("head", student.head));
  NodeId probs = tape.constant(softmax_rows(tf.logits, false));
  return tape.cross_entropy(logits, probs);
}

// --- stage runner ------------------------------------------------------------

void write_report_csv(const StageReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open report file: " + path);
  out << "step,lr,loss\n";
  for (const auto& s : report.steps) out << s.step << "," << s.lr << "," << s.loss << "\n";
}

StageReport run_stage(const StagePlan& plan, const Teacher& teacher, Model& student,
                      const Corpus& corpus, AdamW& opt, const StageRunOptions& opts) {
  long total = plan.total_steps();
  if (total < 1) throw ConfigError("run_stage: token budget yields zero steps");
  long end = opts.end_step < 0 ? total : opts.end_step;
  if (opts.start_step < 0 || end > total || opts.start_step > end)
    throw ConfigError("run_stage: bad step range");

  if (plan.stage == 3 && opts.do_transfer && opts.start_step == 0)
    transfer_weights(teacher, student);

  auto params = student.parameters();
  StageReport report;
  report.stage = plan.stage;
  for (long step = opts.start_step; step < end; ++step) {
    double lr = wsd_lr(step, total, plan);
    std::map<std::string, Tensor> gacc;
    double loss_sum = 0.0;
    for (int i = 0; i < plan.batch_size; ++i) {
      std::uint64_t idx =
          static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(plan.batch_size) + i;
      std::vector<int> tokens = corpus.sequence(idx, plan.seq_len);
      Tape tape;
      std::map<std::string, NodeId> ids;
      NodeId loss = build_stage_loss(tape, plan.stage, teacher, student, tokens, &ids);
      double lv = tape.value(loss).get(0);
      if (!std::isfinite(lv)) throw NanLossError(static_cast<int>(step));
      loss_sum += lv;
      GradMap gm = tape.backward(loss);
      for (const auto& [name, id] : ids) {
        if (!tape.is_trainable(id)) continue;
        auto it = gacc.find(name);
        if (it == gacc.end())
          gacc.emplace(name, gm.at(id));
        else
          it->second = add(it->second, gm.at(id));
      }
    }
    for (auto& [name, g] : gacc) g = scale(g, 1.0 / plan.batch_size);
    opt.step(params, gacc, lr);
    report.steps.push_back({step, lr, loss_sum / plan.batch_size});
  }
  if (!report.steps.empty()) {
    report.initial_loss = report.steps.front().loss;
    report.final_loss = report.steps.back().loss;
  }
  return report;
}

double eval_kd_loss(const Teacher& teacher, const Model& student, const Corpus& corpus,
                    int batches, int seq_len, std::uint64_t first_index) {
  double total = 0.0;
  for (int i = 0; i < batches; ++i) {
    std::vector<int> tokens = corpus.sequence(first_index + i, seq_len);
    TeacherForward tf = teacher_forward(teacher, tokens, {});
    StudentForward sf = student_forward(student, tokens, {});
    total += kd_loss(sf.logits, tf.logits);
  }
  return total / batches;
}

}  // namespace llamba
