#pragma once

#include <map>
#include <string>
#include <vector>

#include "llamba/autodiff.hpp"
#include "llamba/model.hpp"

namespace llamba {

// One distillation stage. Defaults mirror the production recipe: peak lr
// 1e-4 for stages 1-2, batch 64 for stage 1 and 128 afterwards, 10% warmup
// and 10% decay, minimum lr 1e-8. Desk-scale configs override freely.
struct StagePlan {
  int stage = 1;  // 1 = matrix orientation, 2 = hidden-state alignment, 3 = KD
  long token_budget = 0;
  int batch_size = 64;
  int seq_len = 32;
  double peak_lr = 1e-4;
  double warmup_frac = 0.10;
  double decay_frac = 0.10;
  double min_lr = 1e-8;

  long total_steps() const;
};

StagePlan default_plan(int stage, long token_budget, int seq_len = 32);
// Stage budgets in the 300M : 2.7B : 5B ratio, scaled to `total_tokens`.
std::vector<long> stage_token_split(long total_tokens);

// Piecewise-linear warmup -> stable -> decay schedule. Continuous at both
// phase boundaries; lr(total_steps - 1) == min_lr exactly.
double wsd_lr(long step, long total_steps, const StagePlan& plan);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.1;
  double eps = 1e-8;
};

// Decoupled weight decay, bias-corrected moments, state keyed by parameter
// name so it serializes into checkpoints.
struct AdamW {
  AdamWConfig cfg;
  long step_count = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;

  void step(const std::vector<NamedParam>& params, const std::map<std::string, Tensor>& grads,
            double lr);
};

// --- stage losses (plain; the tape versions used in training are checked
// --- against these in tests) ------------------------------------------------

// Mean over heads of ||M_h - A_h||_F^2 / T^2; inputs are [H x T x T].
double matrix_orientation_loss(const Tensor& student_m, const Tensor& teacher_a);
// Mean over positions of ||s_t - t_t||_2^2 / d.
double hidden_state_alignment_loss(const Tensor& student_out, const Tensor& teacher_out);
// Mean over positions of CE(softmax(teacher), log-softmax(student)).
double kd_loss(const Tensor& student_logits, const Tensor& teacher_logits);

// MLP weights, norms, embedding and output head copied verbatim from the
// teacher; mixer parameters untouched.
void transfer_weights(const Teacher& teacher, Model& student);

// --- synthetic corpus --------------------------------------------------------

// Fixed-seed Markov chain over 256 symbols; sequence(i) is a pure function
// of (seed, i), so batch order is reproducible from the step index alone.
class Corpus {
 public:
  static constexpr int kSymbols = 256;
  static constexpr int kBosId = 256;

  explicit Corpus(std::uint64_t seed);
  std::vector<int> sequence(std::uint64_t index, int len, bool with_bos = true) const;

 private:
  std::uint64_t seed_;
  std::vector<int> successors_;     // kSymbols x kBranch
  std::vector<double> cumweights_;  // kSymbols x kBranch, cumulative
  static constexpr int kBranch = 8;
};

// --- stage runner -------------------------------------------------------------

struct StageStep {
  long step;
  double lr;
  double loss;
};

struct StageReport {
  int stage = 0;
  std::vector<StageStep> steps;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

void write_report_csv(const StageReport& report, const std::string& path);

struct StageRunOptions {
  long start_step = 0;   // resume point
  long end_step = -1;    // exclusive; -1 means run to total_steps
  bool do_transfer = true;  // stage 3 weight transfer at step 0
};

// Trainable-parameter name filter for a stage.
bool stage_trains_param(int stage, const std::string& name);

StageReport run_stage(const StagePlan& plan, const Teacher& teacher, Model& student,
                      const Corpus& corpus, AdamW& opt, const StageRunOptions& opts = {});

// Tape-based stage losses, exposed for gradient tests. `binder_out` maps
// parameter names to their leaf node ids.
NodeId build_stage_loss(Tape& tape, int stage, const Teacher& teacher, Model& student,
                        const std::vector<int>& tokens,
                        std::map<std::string, NodeId>* binder_out = nullptr);

// Mean KD loss of the student against the teacher over `batches` held-out
// corpus batches starting at `first_index`.
double eval_kd_loss(const Teacher& teacher, const Model& student, const Corpus& corpus,
                    int batches, int seq_len, std::uint64_t first_index);

}  // namespace llamba
