#include "llamba/mixer.hpp"

#include <cmath>
#include <string>

namespace llamba {

namespace {

// Full-sequence per-channel causal conv, zero-padded on the left.
Tensor conv_seq(const Tensor& x, const Tensor& k) {
  std::size_t t_len = x.rows(), ch = x.cols(), w = k.cols();
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t c = 0; c < ch; ++c) {
      double acc = 0.0;
      for (std::size_t tau = 0; tau < w; ++tau) {
        std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + tau) -
                             static_cast<std::ptrdiff_t>(w - 1);
        if (src < 0) continue;
        acc += k.at(c, tau) * x.at(static_cast<std::size_t>(src), c);
      }
      out.set_at(t, c, acc);
    }
  return out;
}

void check_input(const MixerParams& p, const Tensor& x) {
  if (x.rank() != 2 || x.cols() != static_cast<std::size_t>(p.d))
    throw DimensionError("mixer: input " + x.shape_str() + " does not match model dim d=" +
                         std::to_string(p.d));
}

}  // namespace

double silu_unit_bias() {
  // root of x * sigmoid(x) - 1 on [1, 2]
  double lo = 1.0, hi = 2.0;
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    double f = mid / (1.0 + std::exp(-mid)) - 1.0;
    (f < 0.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

bool exact_identity(const MixerParams& p) { return p.n_heads * p.head_dim == p.d; }

MixerParams init_mixer(int d, int n_heads, int head_dim, int state_dim, std::mt19937_64& rng,
                       DType dt) {
  MixerParams p;
  p.d = d;
  p.n_heads = n_heads;
  p.head_dim = head_dim;
  p.state_dim = state_dim;
  const double bz = silu_unit_bias();
  const double wb_std = 1.0 / std::sqrt(static_cast<double>(d));
  const bool ident = n_heads * head_dim == d;
  for (int h = 0; h < n_heads; ++h) {
    auto P = static_cast<std::size_t>(head_dim);
    auto N = static_cast<std::size_t>(state_dim);
    auto dd = static_cast<std::size_t>(d);
    Tensor wx = Tensor::zeros({dd, P}, dt);
    Tensor wo = Tensor::zeros({P, dd}, dt);
    if (ident) {
      for (std::size_t j = 0; j < P; ++j) {
        wx.set_at(static_cast<std::size_t>(h) * P + j, j, 1.0);
        wo.set_at(j, static_cast<std::size_t>(h) * P + j, 1.0);
      }
    } else {
      wx = Tensor::randn({dd, P}, rng, wb_std, dt);
      wo = Tensor::randn({P, dd}, rng, wb_std, dt);
    }
    p.W_x.push_back(std::move(wx));
    p.W_out.push_back(std::move(wo));
    p.W_z.push_back(Tensor::zeros({dd, P}, dt));
    p.b_z.push_back(Tensor::full({P}, bz, dt));
    // B starts random so stage-1 gradients reach C; C starts at zero so the
    // materialized mixer is exactly the zero matrix at init.
    p.W_B.push_back(Tensor::randn({dd, N}, rng, wb_std, dt));
    p.W_C.push_back(Tensor::zeros({dd, N}, dt));
    p.w_a.push_back(Tensor::zeros({dd, 1}, dt));
    p.b_a.push_back(Tensor::full({1}, 1.0, dt));
    Tensor ck = Tensor::zeros({P, static_cast<std::size_t>(MixerParams::kConvWidth)}, dt);
    for (std::size_t c = 0; c < P; ++c) ck.set_at(c, MixerParams::kConvWidth - 1, 1.0);
    p.conv_x.push_back(std::move(ck));
    Tensor cb = Tensor::zeros({N, static_cast<std::size_t>(MixerParams::kConvWidth)}, dt);
    for (std::size_t c = 0; c < N; ++c) cb.set_at(c, MixerParams::kConvWidth - 1, 1.0);
    p.conv_B.push_back(cb);
    p.conv_C.push_back(std::move(cb));
    p.D.push_back(Tensor::full({1}, 1.0, dt));
  }
  return p;
}

std::size_t RecurrentState::byte_size() const {
  std::size_t bytes = sizeof(position);
  auto acc = [&bytes](const std::vector<Tensor>& ts) {
    for (const auto& t : ts) bytes += t.size() * dtype_size(t.dtype());
  };
  acc(S);
  acc(ring_x);
  acc(ring_B);
  acc(ring_C);
  return bytes;
}

RecurrentState init_state(const MixerParams& p) {
  RecurrentState s;
  auto P = static_cast<std::size_t>(p.head_dim);
  auto N = static_cast<std::size_t>(p.state_dim);
  const std::size_t lag = MixerParams::kConvWidth - 1;
  for (int h = 0; h < p.n_heads; ++h) {
    s.S.push_back(Tensor::zeros({N, P}, p.dtype()));
    s.ring_x.push_back(Tensor::zeros({lag, P}, p.dtype()));
    s.ring_B.push_back(Tensor::zeros({lag, N}, p.dtype()));
    s.ring_C.push_back(Tensor::zeros({lag, N}, p.dtype()));
  }
  return s;
}

MixerProjections project_inputs(const MixerParams& p, const Tensor& x) {
  check_input(p, x);
  if (!x.all_finite()) throw NumericError("mixer: non-finite input");
  MixerProjections proj;
  std::size_t t_len = x.rows();
  for (int h = 0; h < p.n_heads; ++h) {
    proj.xhat.push_back(conv_seq(matmul(x, p.W_x[h]), p.conv_x[h]));
    proj.B.push_back(conv_seq(matmul(x, p.W_B[h]), p.conv_B[h]));
    proj.C.push_back(conv_seq(matmul(x, p.W_C[h]), p.conv_C[h]));
    Tensor logit = matmul(x, p.w_a[h]);
    Tensor a = Tensor::zeros({t_len}, x.dtype());
    for (std::size_t t = 0; t < t_len; ++t)
      a.set(t, 1.0 / (1.0 + std::exp(-(logit.get(t) + p.b_a[h].get(0)))));
    proj.a.push_back(std::move(a));
    proj.z.push_back(add(matmul(x, p.W_z[h]), broadcast_rows(p.b_z[h], t_len)));
  }
  return proj;
}

Tensor recurrent_step(const MixerParams& p, RecurrentState& state, const Tensor& x_t) {
  if (x_t.size() != static_cast<std::size_t>(p.d))
    throw DimensionError("recurrent_step: input " + x_t.shape_str() +
                         " does not match model dim d=" + std::to_string(p.d));
  Tensor xr = reshape(x_t, {1, static_cast<std::size_t>(p.d)});
  auto P = static_cast<std::size_t>(p.head_dim);
  auto N = static_cast<std::size_t>(p.state_dim);
  const std::size_t lag = MixerParams::kConvWidth - 1;
  Tensor out = Tensor::zeros({static_cast<std::size_t>(p.d)}, x_t.dtype());

  auto conv_step = [lag](const Tensor& ring, const Tensor& raw, const Tensor& k) {
    std::size_t ch = raw.size();
    Tensor y = Tensor::zeros({ch}, raw.dtype());
    for (std::size_t c = 0; c < ch; ++c) {
      double acc = k.at(c, lag) * raw.get(c);
      for (std::size_t tau = 0; tau < lag; ++tau) acc += k.at(c, tau) * ring.at(tau, c);
      y.set(c, acc);
    }
    return y;
  };
  auto push_ring = [lag](Tensor& ring, const Tensor& raw) {
    for (std::size_t r = 0; r + 1 < lag; ++r)
      for (std::size_t c = 0; c < ring.cols(); ++c) ring.set_at(r, c, ring.at(r + 1, c));
    for (std::size_t c = 0; c < ring.cols(); ++c) ring.set_at(lag - 1, c, raw.get(c));
  };

  for (int h = 0; h < p.n_heads; ++h) {
    Tensor raw_x = reshape(matmul(xr, p.W_x[h]), {P});
    Tensor raw_B = reshape(matmul(xr, p.W_B[h]), {N});
    Tensor raw_C = reshape(matmul(xr, p.W_C[h]), {N});
    Tensor xh = conv_step(state.ring_x[h], raw_x, p.conv_x[h]);
    Tensor bt = conv_step(state.ring_B[h], raw_B, p.conv_B[h]);
    Tensor ct = conv_step(state.ring_C[h], raw_C, p.conv_C[h]);
    push_ring(state.ring_x[h], raw_x);
    push_ring(state.ring_B[h], raw_B);
    push_ring(state.ring_C[h], raw_C);

    double a = 1.0 / (1.0 + std::exp(-(matmul(xr, p.w_a[h]).get(0) + p.b_a[h].get(0))));
    Tensor& S = state.S[h];
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < P; ++j)
        S.set_at(i, j, a * S.at(i, j) + bt.get(i) * xh.get(j));
    if (!S.all_finite())
      throw NumericError("recurrent_step: non-finite state in head " + std::to_string(h));

    Tensor y = Tensor::zeros({P}, x_t.dtype());
    double dskip = p.D[h].get(0);
    for (std::size_t j = 0; j < P; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < N; ++i) acc += ct.get(i) * S.at(i, j);
      y.set(j, acc + dskip * xh.get(j));
    }
    Tensor z = add(reshape(matmul(xr, p.W_z[h]), {P}), p.b_z[h]);
    Tensor o = mul(y, silu(z));
    Tensor od = matmul(reshape(o, {1, P}), p.W_out[h]);
    for (std::size_t j = 0; j < static_cast<std::size_t>(p.d); ++j)
      out.set(j, out.get(j) + od.get(j));
  }
  state.position += 1;
  return out;
}

std::vector<Tensor> materialize_mixer(const MixerProjections& proj) {
  std::vector<Tensor> ms;
  std::size_t t_len = proj.seq_len();
  for (std::size_t h = 0; h < proj.xhat.size(); ++h) {
    const Tensor& B = proj.B[h];
    const Tensor& C = proj.C[h];
    const Tensor& a = proj.a[h];
    std::size_t n = B.cols();
    Tensor m = Tensor::zeros({t_len, t_len}, B.dtype());
    for (std::size_t i = 0; i < t_len; ++i) {
      double decay = 1.0;
      for (std::size_t j = i + 1; j-- > 0;) {
        if (j < i) decay *= a.get(j + 1);
        double dot = 0.0;
        for (std::size_t k = 0; k < n; ++k) dot += C.at(i, k) * B.at(j, k);
        m.set_at(i, j, dot * decay);
      }
    }
    ms.push_back(std::move(m));
  }
  return ms;
}

Tensor materialize_mixer_stacked(const MixerProjections& proj) {
  auto ms = materialize_mixer(proj);
  std::size_t h = ms.size(), t_len = ms[0].rows();
  Tensor out = Tensor::zeros({h, t_len, t_len}, ms[0].dtype());
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < t_len * t_len; ++j) out.set(i * t_len * t_len + j, ms[i].get(j));
  return out;
}

namespace {

Tensor gate_and_project(const MixerParams& p, const MixerProjections& proj,
                        const std::vector<Tensor>& y_heads) {
  std::size_t t_len = proj.seq_len();
  Tensor out = Tensor::zeros({t_len, static_cast<std::size_t>(p.d)}, p.dtype());
  for (int h = 0; h < p.n_heads; ++h) {
    Tensor o = matmul(mul(y_heads[h], silu(proj.z[h])), p.W_out[h]);
    out = add(out, o);
  }
  return out;
}

}  // namespace

Tensor forward_materialized(const MixerParams& p, const Tensor& x) {
  MixerProjections proj = project_inputs(p, x);
  auto ms = materialize_mixer(proj);
  std::vector<Tensor> y;
  for (int h = 0; h < p.n_heads; ++h)
    y.push_back(add(matmul(ms[h], proj.xhat[h]), scale(proj.xhat[h], p.D[h].get(0))));
  return gate_and_project(p, proj, y);
}

Tensor forward_parallel(const MixerParams& p, const Tensor& x, std::size_t chunk) {
  check_input(p, x);
  if (chunk < 1) throw ConfigError("forward_parallel: chunk size must be >= 1");
  MixerProjections proj = project_inputs(p, x);
  std::size_t t_len = x.rows();
  std::size_t q = std::min(chunk, t_len);
  auto P = static_cast<std::size_t>(p.head_dim);
  auto N = static_cast<std::size_t>(p.state_dim);

  std::vector<Tensor> y_heads;
  for (int h = 0; h < p.n_heads; ++h) {
    const Tensor& B = proj.B[h];
    const Tensor& C = proj.C[h];
    const Tensor& a = proj.a[h];
    const Tensor& xh = proj.xhat[h];
    Tensor y = Tensor::zeros({t_len, P}, p.dtype());
    Tensor carry = Tensor::zeros({N, P}, p.dtype());
    for (std::size_t s = 0; s < t_len; s += q) {
      std::size_t e = std::min(s + q, t_len);
      // intra-chunk materialized mixer
      for (std::size_t i = s; i < e; ++i) {
        double decay = 1.0;
        for (std::size_t j = i + 1; j-- > s;) {
          if (j < i) decay *= a.get(j + 1);
          double dot = 0.0;
          for (std::size_t k = 0; k < N; ++k) dot += C.at(i, k) * B.at(j, k);
          if (dot == 0.0) continue;
          double m = dot * decay;
          for (std::size_t k = 0; k < P; ++k) y.set_at(i, k, y.at(i, k) + m * xh.at(j, k));
        }
      }
      // inter-chunk carry contribution: coef_i = prod_{k=s..i} a_k
      double coef = 1.0;
      for (std::size_t i = s; i < e; ++i) {
        coef *= a.get(i);
        for (std::size_t k = 0; k < P; ++k) {
          double acc = 0.0;
          for (std::size_t n = 0; n < N; ++n) acc += C.at(i, n) * carry.at(n, k);
          y.set_at(i, k, y.at(i, k) + coef * acc);
        }
      }
      // carry update: decayed prior state + chunk contribution
      double full = 1.0;
      for (std::size_t k = s; k < e; ++k) full *= a.get(k);
      Tensor next = Tensor::zeros({N, P}, p.dtype());
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < P; ++k) next.set_at(n, k, full * carry.at(n, k));
      for (std::size_t j = s; j < e; ++j) {
        double decay = 1.0;
        for (std::size_t k = j + 1; k < e; ++k) decay *= a.get(k);
        for (std::size_t n = 0; n < N; ++n) {
          double bv = decay * B.at(j, n);
          if (bv == 0.0) continue;
          for (std::size_t k = 0; k < P; ++k)
            next.set_at(n, k, next.at(n, k) + bv * xh.at(j, k));
        }
      }
      carry = std::move(next);
    }
    // D skip
    double dskip = p.D[h].get(0);
    for (std::size_t i = 0; i < t_len; ++i)
      for (std::size_t k = 0; k < P; ++k) y.set_at(i, k, y.at(i, k) + dskip * xh.at(i, k));
    y_heads.push_back(std::move(y));
  }
  return gate_and_project(p, proj, y_heads);
}

}  // namespace llamba
