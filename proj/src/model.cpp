#include "llamba/model.hpp"

#include <cmath>

namespace llamba {

LlambaConfig preset_1b(int depth, int vocab) {
  return {depth, 2048, 32, 64, 64, 2048, vocab};
}
LlambaConfig preset_3b(int depth, int vocab) {
  return {depth, 3072, 32, 96, 64, 3072, vocab};
}
LlambaConfig preset_8b(int depth, int vocab) {
  return {depth, 4096, 32, 128, 64, 4096, vocab};
}

namespace {

void push_mixer_params(std::vector<NamedParam>& out, const std::string& prefix, MixerParams& p) {
  for (int h = 0; h < p.n_heads; ++h) {
    std::string hp = prefix + "." + std::to_string(h) + ".";
    out.push_back({hp + "W_x", &p.W_x[h]});
    out.push_back({hp + "W_z", &p.W_z[h]});
    out.push_back({hp + "b_z", &p.b_z[h]});
    out.push_back({hp + "W_B", &p.W_B[h]});
    out.push_back({hp + "W_C", &p.W_C[h]});
    out.push_back({hp + "w_a", &p.w_a[h]});
    out.push_back({hp + "b_a", &p.b_a[h]});
    out.push_back({hp + "conv_x", &p.conv_x[h]});
    out.push_back({hp + "conv_B", &p.conv_B[h]});
    out.push_back({hp + "conv_C", &p.conv_C[h]});
    out.push_back({hp + "D", &p.D[h]});
    out.push_back({hp + "W_out", &p.W_out[h]});
  }
}

void push_mlp_params(std::vector<NamedParam>& out, const std::string& prefix, MlpParams& p) {
  out.push_back({prefix + ".W_gate", &p.W_gate});
  out.push_back({prefix + ".W_up", &p.W_up});
  out.push_back({prefix + ".W_down", &p.W_down});
}

void check_tokens(const std::vector<int>& tokens, int vocab) {
  if (tokens.empty()) throw ConfigError("forward: empty token sequence");
  for (int t : tokens)
    if (t < 0 || t >= vocab)
      throw ConfigError("forward: token id " + std::to_string(t) + " out of vocab " +
                        std::to_string(vocab));
}

Tensor embed_tokens(const Tensor& embed, const std::vector<int>& tokens) {
  std::size_t d = embed.cols();
  Tensor x = Tensor::zeros({tokens.size(), d}, embed.dtype());
  for (std::size_t t = 0; t < tokens.size(); ++t)
    for (std::size_t j = 0; j < d; ++j)
      x.set_at(t, j, embed.at(static_cast<std::size_t>(tokens[t]), j));
  return x;
}

Tensor lm_head(const Model& m, const Tensor& x) {
  Tensor normed = rmsnorm(x, m.final_norm, m.cfg.norm_eps);
  return m.cfg.tie_embeddings ? matmul(normed, transpose(m.embed)) : matmul(normed, m.head);
}

}  // namespace

std::vector<NamedParam> Model::parameters() {
  std::vector<NamedParam> out;
  out.push_back({"embed", &embed});
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    std::string bp = "blocks." + std::to_string(b);
    out.push_back({bp + ".norm1", &blocks[b].norm1});
    push_mixer_params(out, bp + ".mixer", blocks[b].mixer);
    out.push_back({bp + ".norm2", &blocks[b].norm2});
    push_mlp_params(out, bp + ".mlp", blocks[b].mlp);
  }
  out.push_back({"final_norm", &final_norm});
  if (!cfg.tie_embeddings) out.push_back({"head", &head});
  return out;
}

std::vector<NamedParam> Teacher::parameters() {
  std::vector<NamedParam> out;
  out.push_back({"embed", &embed});
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    std::string bp = "blocks." + std::to_string(b);
    out.push_back({bp + ".norm1", &blocks[b].norm1});
    for (std::size_t h = 0; h < blocks[b].attn.W_q.size(); ++h)
      out.push_back({bp + ".attn." + std::to_string(h) + ".W_q", &blocks[b].attn.W_q[h]});
    for (std::size_t h = 0; h < blocks[b].attn.W_k.size(); ++h) {
      out.push_back({bp + ".attn." + std::to_string(h) + ".W_k", &blocks[b].attn.W_k[h]});
      out.push_back({bp + ".attn." + std::to_string(h) + ".W_v", &blocks[b].attn.W_v[h]});
    }
    for (std::size_t h = 0; h < blocks[b].attn.W_o.size(); ++h)
      out.push_back({bp + ".attn." + std::to_string(h) + ".W_o", &blocks[b].attn.W_o[h]});
    out.push_back({bp + ".norm2", &blocks[b].norm2});
    push_mlp_params(out, bp + ".mlp", blocks[b].mlp);
  }
  out.push_back({"final_norm", &final_norm});
  if (!cfg.tie_embeddings) out.push_back({"head", &head});
  return out;
}

Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps) {
  if (eps <= 0.0) throw ConfigError("rmsnorm: eps must be > 0");
  Tensor x2 = x.rank() == 1 ? reshape(x, {1, x.size()}) : x;
  if (weight.size() != x2.cols())
    throw DimensionError("rmsnorm: weight " + weight.shape_str() + " does not match " +
                         x2.shape_str());
  Tensor out = Tensor::zeros(x2.shape(), x2.dtype());
  std::size_t d = x2.cols();
  for (std::size_t t = 0; t < x2.rows(); ++t) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += x2.at(t, j) * x2.at(t, j);
    double r = std::sqrt(ss / static_cast<double>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) out.set_at(t, j, x2.at(t, j) * weight.get(j) / r);
  }
  return x.rank() == 1 ? reshape(out, {x.size()}) : out;
}

Tensor gated_mlp(const Tensor& x, const MlpParams& mlp) {
  return matmul(mul(silu(matmul(x, mlp.W_gate)), matmul(x, mlp.W_up)), mlp.W_down);
}

Tensor student_mixer_sublayer(const Model& m, std::size_t block, const Tensor& x) {
  const LlambaBlock& b = m.blocks.at(block);
  return add(x, forward_parallel(b.mixer, rmsnorm(x, b.norm1, m.cfg.norm_eps), 32));
}

StudentForward student_forward(const Model& m, const std::vector<int>& tokens,
                               const Capture& cap) {
  check_tokens(tokens, m.cfg.vocab);
  StudentForward fw;
  Tensor x = embed_tokens(m.embed, tokens);
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    const LlambaBlock& blk = m.blocks[b];
    if (cap.hidden_states) fw.block_inputs.push_back(x);
    Tensor normed = rmsnorm(x, blk.norm1, m.cfg.norm_eps);
    if (cap.mixer_matrices)
      fw.mixer_matrices.push_back(materialize_mixer(project_inputs(blk.mixer, normed)));
    Tensor h1 = add(x, forward_parallel(blk.mixer, normed, 32));
    if (cap.hidden_states) fw.mixer_outputs.push_back(h1);
    x = add(h1, gated_mlp(rmsnorm(h1, blk.norm2, m.cfg.norm_eps), blk.mlp));
    if (cap.hidden_states) fw.block_outputs.push_back(x);
  }
  fw.logits = lm_head(m, x);
  return fw;
}

Tensor teacher_attn_sublayer(const Teacher& t, std::size_t block, const Tensor& x,
                             std::vector<Tensor>* attn_matrices) {
  const TeacherBlock& blk = t.blocks.at(block);
  Tensor u = rmsnorm(x, blk.norm1, t.cfg.norm_eps);
  int hd = t.attn_head_dim();
  int kvh = t.kv_heads();
  int group = t.cfg.n_heads / kvh;
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  Tensor out = x;
  for (int h = 0; h < t.cfg.n_heads; ++h) {
    int kh = h / group;
    Tensor q = matmul(u, blk.attn.W_q[h]);
    Tensor k = matmul(u, blk.attn.W_k[kh]);
    Tensor v = matmul(u, blk.attn.W_v[kh]);
    Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt);
    double slope = t.alibi_slope(h);
    for (std::size_t i = 0; i < scores.rows(); ++i)
      for (std::size_t j = 0; j <= i; ++j)
        scores.set_at(i, j, scores.at(i, j) - slope * static_cast<double>(i - j));
    Tensor attn = softmax_rows(scores, /*causal=*/true);
    if (attn_matrices) attn_matrices->push_back(attn);
    out = add(out, matmul(matmul(attn, v), blk.attn.W_o[h]));
  }
  return out;
}

TeacherForward teacher_forward(const Teacher& t, const std::vector<int>& tokens,
                               const Capture& cap) {
  check_tokens(tokens, t.cfg.vocab);
  TeacherForward fw;
  Tensor x = embed_tokens(t.embed, tokens);
  for (std::size_t b = 0; b < t.blocks.size(); ++b) {
    if (cap.hidden_states) fw.block_inputs.push_back(x);
    std::vector<Tensor> mats;
    Tensor h1 = teacher_attn_sublayer(t, b, x, cap.mixer_matrices ? &mats : nullptr);
    if (cap.mixer_matrices) fw.attn_matrices.push_back(std::move(mats));
    if (cap.hidden_states) fw.attn_outputs.push_back(h1);
    x = add(h1, gated_mlp(rmsnorm(h1, t.blocks[b].norm2, t.cfg.norm_eps), t.blocks[b].mlp));
    if (cap.hidden_states) fw.block_outputs.push_back(x);
  }
  Tensor normed = rmsnorm(x, t.final_norm, t.cfg.norm_eps);
  fw.logits = t.cfg.tie_embeddings ? matmul(normed, transpose(t.embed)) : matmul(normed, t.head);
  return fw;
}

std::size_t ModelState::byte_size() const {
  std::size_t bytes = 0;
  for (const auto& s : blocks) bytes += s.byte_size();
  return bytes;
}

ModelState init_model_state(const Model& m) {
  ModelState st;
  for (const auto& b : m.blocks) st.blocks.push_back(init_state(b.mixer));
  return st;
}

Tensor decode(const Model& m, ModelState& state, int token) {
  if (state.blocks.size() != m.blocks.size())
    throw ConfigError("decode: state has " + std::to_string(state.blocks.size()) +
                      " block states, model has " + std::to_string(m.blocks.size()));
  check_tokens({token}, m.cfg.vocab);
  std::size_t d = m.embed.cols();
  Tensor x = Tensor::zeros({d}, m.embed.dtype());
  for (std::size_t j = 0; j < d; ++j) x.set(j, m.embed.at(static_cast<std::size_t>(token), j));
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    const LlambaBlock& blk = m.blocks[b];
    Tensor y = recurrent_step(blk.mixer, state.blocks[b], rmsnorm(x, blk.norm1, m.cfg.norm_eps));
    Tensor h1 = add(x, y);
    Tensor v = gated_mlp(reshape(rmsnorm(h1, blk.norm2, m.cfg.norm_eps), {1, d}), blk.mlp);
    x = add(h1, reshape(v, {d}));
  }
  return reshape(lm_head(m, reshape(x, {1, d})), {static_cast<std::size_t>(m.cfg.vocab)});
}

std::size_t KVCache::byte_size() const {
  std::size_t n = 0;
  for (const auto& layer : K)
    for (const auto& buf : layer) n += buf.size();
  for (const auto& layer : V)
    for (const auto& buf : layer) n += buf.size();
  return n * dtype_size(dtype) + sizeof(position);
}

KVCache init_kv_cache(const Teacher& t) {
  KVCache c;
  c.dtype = t.embed.dtype();
  c.K.assign(t.blocks.size(), std::vector<std::vector<double>>(t.kv_heads()));
  c.V.assign(t.blocks.size(), std::vector<std::vector<double>>(t.kv_heads()));
  return c;
}

Tensor teacher_decode(const Teacher& t, KVCache& cache, int token) {
  check_tokens({token}, t.cfg.vocab);
  std::size_t d = t.embed.cols();
  auto hd = static_cast<std::size_t>(t.attn_head_dim());
  int kvh = t.kv_heads();
  int group = t.cfg.n_heads / kvh;
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  Tensor x = Tensor::zeros({1, d}, t.embed.dtype());
  for (std::size_t j = 0; j < d; ++j) x.set_at(0, j, t.embed.at(static_cast<std::size_t>(token), j));
  for (std::size_t b = 0; b < t.blocks.size(); ++b) {
    const TeacherBlock& blk = t.blocks[b];
    Tensor u = rmsnorm(x, blk.norm1, t.cfg.norm_eps);
    for (int kh = 0; kh < kvh; ++kh) {
      Tensor k = matmul(u, blk.attn.W_k[kh]);
      Tensor v = matmul(u, blk.attn.W_v[kh]);
      for (std::size_t j = 0; j < hd; ++j) {
        cache.K[b][kh].push_back(k.get(j));
        cache.V[b][kh].push_back(v.get(j));
      }
    }
    std::size_t t_len = cache.K[b][0].size() / hd;
    Tensor out = x;
    for (int h = 0; h < t.cfg.n_heads; ++h) {
      int kh = h / group;
      Tensor q = matmul(u, blk.attn.W_q[h]);
      const auto& kb = cache.K[b][kh];
      const auto& vb = cache.V[b][kh];
      // softmax over cached positions
      std::vector<double> sc(t_len);
      double mx = -1e300;
      double slope = t.alibi_slope(h);
      for (std::size_t p = 0; p < t_len; ++p) {
        double s = 0.0;
        for (std::size_t j = 0; j < hd; ++j) s += q.get(j) * kb[p * hd + j];
        sc[p] = s * inv_sqrt - slope * static_cast<double>(t_len - 1 - p);
        mx = std::max(mx, sc[p]);
      }
      double z = 0.0;
      for (std::size_t p = 0; p < t_len; ++p) {
        sc[p] = std::exp(sc[p] - mx);
        z += sc[p];
      }
      Tensor av = Tensor::zeros({1, hd}, x.dtype());
      for (std::size_t p = 0; p < t_len; ++p) {
        double w = sc[p] / z;
        for (std::size_t j = 0; j < hd; ++j) av.set_at(0, j, av.at(0, j) + w * vb[p * hd + j]);
      }
      out = add(out, matmul(av, blk.attn.W_o[h]));
    }
    x = add(out, gated_mlp(rmsnorm(out, blk.norm2, t.cfg.norm_eps), blk.mlp));
  }
  cache.position += 1;
  Tensor normed = rmsnorm(x, t.final_norm, t.cfg.norm_eps);
  Tensor logits =
      t.cfg.tie_embeddings ? matmul(normed, transpose(t.embed)) : matmul(normed, t.head);
  return reshape(logits, {static_cast<std::size_t>(t.cfg.vocab)});
}

Model init_student(const LlambaConfig& cfg, std::uint64_t seed, DType dt) {
  std::mt19937_64 rng(seed);
  Model m;
  m.cfg = cfg;
  auto d = static_cast<std::size_t>(cfg.d_model);
  auto v = static_cast<std::size_t>(cfg.vocab);
  auto mh = static_cast<std::size_t>(cfg.mlp_hidden);
  double s = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  m.embed = Tensor::randn({v, d}, rng, 1.0, dt);
  for (int b = 0; b < cfg.n_blocks; ++b) {
    LlambaBlock blk;
    blk.norm1 = Tensor::full({d}, 1.0, dt);
    blk.norm2 = Tensor::full({d}, 1.0, dt);
    blk.mixer = init_mixer(cfg.d_model, cfg.n_heads, cfg.head_dim, cfg.state_dim, rng, dt);
    blk.mlp.W_gate = Tensor::randn({d, mh}, rng, s, dt);
    blk.mlp.W_up = Tensor::randn({d, mh}, rng, s, dt);
    blk.mlp.W_down = Tensor::randn({mh, d}, rng, 1.0 / std::sqrt(static_cast<double>(mh)), dt);
    m.blocks.push_back(std::move(blk));
  }
  m.final_norm = Tensor::full({d}, 1.0, dt);
  m.head = Tensor::randn({d, v}, rng, s, dt);
  return m;
}

Teacher init_teacher(const LlambaConfig& cfg, std::uint64_t seed, DType dt) {
  std::mt19937_64 rng(seed);
  Teacher t;
  t.cfg = cfg;
  auto d = static_cast<std::size_t>(cfg.d_model);
  auto v = static_cast<std::size_t>(cfg.vocab);
  auto mh = static_cast<std::size_t>(cfg.mlp_hidden);
  auto hd = static_cast<std::size_t>(cfg.d_model / cfg.n_heads);
  int kvh = cfg.n_kv_heads > 0 ? cfg.n_kv_heads : cfg.n_heads;
  if (cfg.n_heads % kvh != 0)
    throw ConfigError("init_teacher: n_kv_heads must divide n_heads");
  double s = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  t.embed = Tensor::randn({v, d}, rng, 1.0, dt);
  for (int b = 0; b < cfg.n_blocks; ++b) {
    TeacherBlock blk;
    blk.norm1 = Tensor::full({d}, 1.0, dt);
    blk.norm2 = Tensor::full({d}, 1.0, dt);
    // q/k start at half scale so attention logits are modest at init and
    // the recency bias (alibi_slope) dominates early structure
    double s_qk = 0.5 * s;
    for (int h = 0; h < cfg.n_heads; ++h) {
      blk.attn.W_q.push_back(Tensor::randn({d, hd}, rng, s_qk, dt));
      blk.attn.W_o.push_back(Tensor::randn({hd, d}, rng, s, dt));
    }
    for (int h = 0; h < kvh; ++h) {
      blk.attn.W_k.push_back(Tensor::randn({d, hd}, rng, s_qk, dt));
      blk.attn.W_v.push_back(Tensor::randn({d, hd}, rng, s, dt));
    }
    blk.mlp.W_gate = Tensor::randn({d, mh}, rng, s, dt);
    blk.mlp.W_up = Tensor::randn({d, mh}, rng, s, dt);
    blk.mlp.W_down = Tensor::randn({mh, d}, rng, 1.0 / std::sqrt(static_cast<double>(mh)), dt);
    t.blocks.push_back(std::move(blk));
  }
  t.final_norm = Tensor::full({d}, 1.0, dt);
  t.head = Tensor::randn({d, v}, rng, s, dt);
  return t;
}

Model cast_model(const Model& m, DType dt) {
  Model out = m;
  for (auto& p : out.parameters()) *p.tensor = p.tensor->cast(dt);
  return out;
}

int sample_token(const Tensor& logits, double temperature, std::mt19937_64& rng) {
  if (!logits.all_finite()) throw NumericError("sample_token: non-finite logits");
  std::size_t v = logits.size();
  if (temperature <= 0.0) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v; ++i)
      if (logits.get(i) > logits.get(best)) best = i;
    return static_cast<int>(best);
  }
  Tensor probs = softmax_rows(reshape(scale(logits, 1.0 / temperature), {1, v}), false);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double r = unif(rng), acc = 0.0;
  for (std::size_t i = 0; i < v; ++i) {
    acc += probs.get(i);
    if (r <= acc) return static_cast<int>(i);
  }
  return static_cast<int>(v - 1);
}

}  // namespace llamba
