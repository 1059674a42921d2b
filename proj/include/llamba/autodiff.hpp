#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "llamba/tensor.hpp"

namespace llamba {

// Op kinds recordable on a Tape. The set is closed; composite ops
// (rmsnorm, cross-entropy, decay matrix) carry their own backward rules.
enum class Op {
  Leaf,
  Add,
  Mul,
  Scale,
  Matmul,
  Silu,
  Sigmoid,
  Exp,
  Sum,
  Mean,
  Reshape,
  Transpose,
  BroadcastRows,
  BroadcastFull,
  SoftmaxRows,
  RmsNorm,
  DecayMatrix,
  GatherRows,
  CrossEntropy,
  CausalConv,
};

using NodeId = int;

// Gradients of a scalar loss w.r.t. trainable leaves, keyed by node id.
struct GradMap {
  std::unordered_map<NodeId, Tensor> grads;
  const Tensor& at(NodeId id) const { return grads.at(id); }
};

// Append-only reverse-mode tape. Forward values are computed eagerly at
// record time; backward walks the nodes in strict reverse order.
class Tape {
 public:
  NodeId leaf(Tensor value, bool trainable);
  NodeId constant(Tensor value) { return leaf(std::move(value), false); }

  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);
  NodeId matmul(NodeId a, NodeId b);
  NodeId silu(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId exp(NodeId a);
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  NodeId reshape(NodeId a, std::vector<std::size_t> shape);
  NodeId transpose(NodeId a);
  NodeId broadcast_rows(NodeId v, std::size_t rows);
  // Tile a scalar (size-1) node to an arbitrary shape.
  NodeId broadcast_full(NodeId s, std::vector<std::size_t> shape);
  NodeId softmax_rows(NodeId a, bool causal);
  // x[T x d], weight[d] -> x / sqrt(mean(x^2, per row) + eps) * weight
  NodeId rmsnorm(NodeId x, NodeId weight, double eps);
  // a[T] (all entries > 0) -> lower-triangular [T x T] with
  // out[i][j] = prod_{k=j+1..i} a_k for j <= i. Backward uses the
  // log-space form, valid because a is sigmoid-parameterized.
  NodeId decay_matrix(NodeId a);
  NodeId gather_rows(NodeId table, std::vector<int> ids);
  // Mean over rows of CE(teacher_probs row, log-softmax(logits row)).
  // teacher_probs must be a constant (no gradient flows into it).
  NodeId cross_entropy(NodeId logits, NodeId teacher_probs);
  // x[T x C], kernels[C x k]: per-channel causal convolution,
  // y[t][c] = sum_tau k[c][tau] * x[t - (k-1) + tau][c], zero-padded.
  NodeId causal_conv(NodeId x, NodeId kernels);

  // Generic entry point for simple ops; throws on ops that need extra
  // arguments or on anything unknown.
  NodeId record(Op op, const std::vector<NodeId>& inputs);

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  std::size_t node_count() const { return nodes_.size(); }
  bool is_trainable(NodeId id) const { return nodes_.at(id).trainable; }

  GradMap backward(NodeId loss) const;

 private:
  struct Node {
    Op op = Op::Leaf;
    std::vector<NodeId> inputs;
    Tensor value;
    bool trainable = false;
    double c = 0.0;                 // Scale
    bool causal = false;            // SoftmaxRows
    double eps = 0.0;               // RmsNorm
    std::vector<int> ids;           // GatherRows
    Tensor aux;                     // saved forward intermediate
  };

  std::vector<Node> nodes_;

  NodeId push(Node n);
  const Node& node(NodeId id) const { return nodes_.at(id); }
};

}  // namespace llamba
