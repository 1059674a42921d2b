#pragma once

#include <random>
#include <vector>

#include "llamba/tensor.hpp"

namespace llamba {

// Discrete Mamba-2 mixer weights. Heads are fully untied: each head owns
// its own x/z/B/C projections, conv kernels, decay projection, skip scalar
// and output slice. The decay factor a_t is sigmoid(w_a . u_t + b_a), so
// a_t lies strictly in (0,1).
struct MixerParams {
  int d = 0;          // model dim
  int n_heads = 0;    // H
  int head_dim = 0;   // P
  int state_dim = 0;  // N
  static constexpr int kConvWidth = 4;

  std::vector<Tensor> W_x;     // per head, d x P
  std::vector<Tensor> W_z;     // per head, d x P (gate, no conv)
  std::vector<Tensor> b_z;     // per head, P
  std::vector<Tensor> W_B;     // per head, d x N
  std::vector<Tensor> W_C;     // per head, d x N
  std::vector<Tensor> w_a;     // per head, d x 1
  std::vector<Tensor> b_a;     // per head, scalar
  std::vector<Tensor> conv_x;  // per head, P x 4
  std::vector<Tensor> conv_B;  // per head, N x 4
  std::vector<Tensor> conv_C;  // per head, N x 4
  std::vector<Tensor> D;       // per head, scalar skip
  std::vector<Tensor> W_out;   // per head, P x d

  DType dtype() const { return W_x.at(0).dtype(); }
};

// Per-timestep, per-head streams after projection + causal conv.
struct MixerProjections {
  std::vector<Tensor> xhat;  // per head, T x P
  std::vector<Tensor> B;     // per head, T x N
  std::vector<Tensor> C;     // per head, T x N
  std::vector<Tensor> a;     // per head, T (in (0,1))
  std::vector<Tensor> z;     // per head, T x P (pre-activation gate)
  std::size_t seq_len() const { return xhat.at(0).rows(); }
};

// Fixed-size decode state: per-head N x P state matrix plus conv ring
// buffers holding the last kConvWidth-1 raw projected rows. Its byte size
// depends only on (H, N, P, dtype), never on the position counter.
struct RecurrentState {
  std::vector<Tensor> S;       // per head, N x P
  std::vector<Tensor> ring_x;  // per head, 3 x P
  std::vector<Tensor> ring_B;  // per head, 3 x N
  std::vector<Tensor> ring_C;  // per head, 3 x N
  long position = 0;

  std::size_t byte_size() const;
};

// Identity-kernel / identity-block initialization. When H*P == d the fresh
// block is the exact identity map (C projections start at zero, conv is the
// identity kernel, gate bias solves silu(b) = 1, D = 1, W_out places head
// outputs back at their input coordinates). When H*P != d, W_out falls back
// to scaled random columns and the block is only approximately identity;
// `exact_identity` reports which case applies.
MixerParams init_mixer(int d, int n_heads, int head_dim, int state_dim, std::mt19937_64& rng,
                       DType dt = DType::F64);
bool exact_identity(const MixerParams& p);

// Solution of x * sigmoid(x) = 1, found by bisection.
double silu_unit_bias();

RecurrentState init_state(const MixerParams& p);

MixerProjections project_inputs(const MixerParams& p, const Tensor& x);

// One decode step; mutates `state` and returns the mixed output row [d].
Tensor recurrent_step(const MixerParams& p, RecurrentState& state, const Tensor& x_t);

// Chunked scan over the full sequence; mathematically identical to T
// recurrent steps for any chunk size 1 <= Q <= T.
Tensor forward_parallel(const MixerParams& p, const Tensor& x, std::size_t chunk);

// Per-head lower-triangular token-mixing matrices,
// M[i][j] = (C_i . B_j) * prod_{k=j+1..i} a_k. Gate and D-skip excluded.
std::vector<Tensor> materialize_mixer(const MixerProjections& proj);
// Same, packed as a rank-3 [H x T x T] tensor.
Tensor materialize_mixer_stacked(const MixerProjections& proj);

// Full mixer output via the materialized path (one-chunk evaluation).
Tensor forward_materialized(const MixerParams& p, const Tensor& x);

}  // namespace llamba
