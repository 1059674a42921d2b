#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "llamba/mixer.hpp"
#include "llamba/tensor.hpp"

namespace llamba {

struct LlambaConfig {
  int n_blocks = 2;
  int d_model = 32;
  int n_heads = 2;
  int head_dim = 16;   // mixer head dim P
  int state_dim = 16;  // mixer state dim N
  int mlp_hidden = 64;
  int vocab = 258;
  double norm_eps = 1e-5;
  bool tie_embeddings = false;
  int n_kv_heads = 0;  // teacher only; 0 means = n_heads
};

// Reference presets (full-scale shapes; instantiate at reduced depth for
// desk-scale runs via `depth` and `vocab`).
LlambaConfig preset_1b(int depth = 16, int vocab = 258);
LlambaConfig preset_3b(int depth = 28, int vocab = 258);
LlambaConfig preset_8b(int depth = 32, int vocab = 258);

struct MlpParams {
  Tensor W_gate;  // d x m
  Tensor W_up;    // d x m
  Tensor W_down;  // m x d
};

struct NamedParam {
  std::string name;
  Tensor* tensor;
};

struct LlambaBlock {
  Tensor norm1;  // d
  MixerParams mixer;
  Tensor norm2;  // d
  MlpParams mlp;
};

struct Model {
  LlambaConfig cfg;
  Tensor embed;  // vocab x d
  std::vector<LlambaBlock> blocks;
  Tensor final_norm;  // d
  Tensor head;        // d x vocab (ignored when tie_embeddings)

  std::vector<NamedParam> parameters();
};

// --- toy attention teacher ----------------------------------------------

struct AttnParams {
  std::vector<Tensor> W_q;  // per query head, d x hd
  std::vector<Tensor> W_k;  // per kv head, d x hd
  std::vector<Tensor> W_v;  // per kv head, d x hd
  std::vector<Tensor> W_o;  // per query head, hd x d
};

struct TeacherBlock {
  Tensor norm1;
  AttnParams attn;
  Tensor norm2;
  MlpParams mlp;
};

struct Teacher {
  LlambaConfig cfg;  // head dim for attention is d_model / n_heads
  Tensor embed;
  std::vector<TeacherBlock> blocks;
  Tensor final_norm;
  Tensor head;

  int attn_head_dim() const { return cfg.d_model / cfg.n_heads; }
  int kv_heads() const { return cfg.n_kv_heads > 0 ? cfg.n_kv_heads : cfg.n_heads; }
  // ALiBi-style recency bias: attention logits get -slope*(i-j) per head.
  // Gives the position-encoding-free teacher the recency structure real
  // teachers derive from RoPE; no stored parameters.
  double alibi_slope(int head) const { return std::pow(2.0, -(head + 1)); }
  std::vector<NamedParam> parameters();
};

// --- ops ------------------------------------------------------------------

Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps);
Tensor gated_mlp(const Tensor& x, const MlpParams& mlp);

struct Capture {
  bool hidden_states = false;
  bool mixer_matrices = false;
};

struct StudentForward {
  Tensor logits;                                  // T x V
  std::vector<Tensor> block_inputs;               // per block, T x d
  std::vector<Tensor> mixer_outputs;              // per block, T x d (x + Mixer(norm1 x))
  std::vector<Tensor> block_outputs;              // per block, T x d
  std::vector<std::vector<Tensor>> mixer_matrices;  // per block, per head T x T
};

struct TeacherForward {
  Tensor logits;
  std::vector<Tensor> block_inputs;
  std::vector<Tensor> attn_outputs;  // per block, x + Attn(norm1 x)
  std::vector<Tensor> block_outputs;
  std::vector<std::vector<Tensor>> attn_matrices;  // per block, per query head, T x T
};

StudentForward student_forward(const Model& m, const std::vector<int>& tokens,
                               const Capture& cap = {});
TeacherForward teacher_forward(const Teacher& t, const std::vector<int>& tokens,
                               const Capture& cap = {});

// The mixer sub-block map x -> x + Mixer(rmsnorm(x)) for one block.
Tensor student_mixer_sublayer(const Model& m, std::size_t block, const Tensor& x);
Tensor teacher_attn_sublayer(const Teacher& t, std::size_t block, const Tensor& x,
                             std::vector<Tensor>* attn_matrices = nullptr);

// --- decoding ---------------------------------------------------------------

struct ModelState {
  std::vector<RecurrentState> blocks;
  std::size_t byte_size() const;
};

ModelState init_model_state(const Model& m);
// Single-token step; returns logits [V] and advances the per-block states.
Tensor decode(const Model& m, ModelState& state, int token);

// KV-cached decode state for the attention baseline; grows with position.
struct KVCache {
  // [layer][kv head] -> row-major (t x hd) buffers
  std::vector<std::vector<std::vector<double>>> K, V;
  long position = 0;
  DType dtype = DType::F32;
  std::size_t byte_size() const;
};

KVCache init_kv_cache(const Teacher& t);
Tensor teacher_decode(const Teacher& t, KVCache& cache, int token);

// --- init ------------------------------------------------------------------

Model init_student(const LlambaConfig& cfg, std::uint64_t seed, DType dt = DType::F64);
Teacher init_teacher(const LlambaConfig& cfg, std::uint64_t seed, DType dt = DType::F64);

Model cast_model(const Model& m, DType dt);

// Greedy (temperature 0) or temperature sampling from a logits row.
int sample_token(const Tensor& logits, double temperature, std::mt19937_64& rng);

}  // namespace llamba
