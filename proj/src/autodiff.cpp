#include "llamba/autodiff.hpp"

#include <cmath>

namespace llamba {

NodeId Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::leaf(Tensor value, bool trainable) {
  Node n;
  n.op = Op::Leaf;
  n.value = std::move(value);
  n.trainable = trainable;
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  Node n;
  n.op = Op::Add;
  n.inputs = {a, b};
  n.value = llamba::add(value(a), value(b));
  return push(std::move(n));
}

NodeId Tape::mul(NodeId a, NodeId b) {
  Node n;
  n.op = Op::Mul;
  n.inputs = {a, b};
  n.value = llamba::mul(value(a), value(b));
  return push(std::move(n));
}

NodeId Tape::scale(NodeId a, double c) {
  Node n;
  n.op = Op::Scale;
  n.inputs = {a};
  n.c = c;
  n.value = llamba::scale(value(a), c);
  return push(std::move(n));
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  Node n;
  n.op = Op::Matmul;
  n.inputs = {a, b};
  n.value = llamba::matmul(value(a), value(b));
  return push(std::move(n));
}

NodeId Tape::silu(NodeId a) {
  Node n;
  n.op = Op::Silu;
  n.inputs = {a};
  n.value = llamba::silu(value(a));
  return push(std::move(n));
}

NodeId Tape::sigmoid(NodeId a) {
  Node n;
  n.op = Op::Sigmoid;
  n.inputs = {a};
  n.value = llamba::sigmoid(value(a));
  return push(std::move(n));
}

NodeId Tape::exp(NodeId a) {
  Node n;
  n.op = Op::Exp;
  n.inputs = {a};
  n.value = llamba::exp(value(a));
  return push(std::move(n));
}

NodeId Tape::sum(NodeId a) {
  Node n;
  n.op = Op::Sum;
  n.inputs = {a};
  n.value = Tensor::scalar(llamba::sum(value(a)), value(a).dtype());
  return push(std::move(n));
}

NodeId Tape::mean(NodeId a) {
  Node n;
  n.op = Op::Mean;
  n.inputs = {a};
  n.value = Tensor::scalar(llamba::mean(value(a)), value(a).dtype());
  return push(std::move(n));
}

NodeId Tape::reshape(NodeId a, std::vector<std::size_t> shape) {
  Node n;
  n.op = Op::Reshape;
  n.inputs = {a};
  n.value = llamba::reshape(value(a), std::move(shape));
  return push(std::move(n));
}

NodeId Tape::transpose(NodeId a) {
  Node n;
  n.op = Op::Transpose;
  n.inputs = {a};
  n.value = llamba::transpose(value(a));
  return push(std::move(n));
}

NodeId Tape::broadcast_rows(NodeId v, std::size_t rows) {
  Node n;
  n.op = Op::BroadcastRows;
  n.inputs = {v};
  n.value = llamba::broadcast_rows(value(v), rows);
  return push(std::move(n));
}

NodeId Tape::broadcast_full(NodeId s, std::vector<std::size_t> shape) {
  const Tensor& sv = value(s);
  if (sv.size() != 1)
    throw DimensionError("broadcast_full: input must be scalar, got " + sv.shape_str());
  Node n;
  n.op = Op::BroadcastFull;
  n.inputs = {s};
  n.value = Tensor::full(std::move(shape), sv.get(0), sv.dtype());
  return push(std::move(n));
}

NodeId Tape::softmax_rows(NodeId a, bool causal) {
  Node n;
  n.op = Op::SoftmaxRows;
  n.inputs = {a};
  n.causal = causal;
  n.value = llamba::softmax_rows(value(a), causal);
  return push(std::move(n));
}

NodeId Tape::rmsnorm(NodeId x, NodeId weight, double eps) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(weight);
  if (xv.rank() != 2 || wv.size() != xv.cols())
    throw DimensionError("rmsnorm: expects x[T x d], weight[d], got " + xv.shape_str() + " and " +
                         wv.shape_str());
  std::size_t t_len = xv.rows(), d = xv.cols();
  Tensor out = Tensor::zeros(xv.shape(), xv.dtype());
  Tensor rms = Tensor::zeros({t_len}, xv.dtype());
  for (std::size_t t = 0; t < t_len; ++t) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += xv.at(t, j) * xv.at(t, j);
    double r = std::sqrt(ss / static_cast<double>(d) + eps);
    rms.set(t, r);
    for (std::size_t j = 0; j < d; ++j) out.set_at(t, j, xv.at(t, j) * wv.get(j) / r);
  }
  Node n;
  n.op = Op::RmsNorm;
  n.inputs = {x, weight};
  n.eps = eps;
  n.value = std::move(out);
  n.aux = std::move(rms);
  return push(std::move(n));
}

NodeId Tape::decay_matrix(NodeId a) {
  const Tensor& av = value(a);
  std::size_t t_len = av.size();
  for (std::size_t k = 0; k < t_len; ++k)
    if (!(av.get(k) > 0.0))
      throw ConfigError("decay_matrix: factors must be strictly positive");
  Tensor out = Tensor::zeros({t_len, t_len}, av.dtype());
  for (std::size_t i = 0; i < t_len; ++i) {
    out.set_at(i, i, 1.0);
    double p = 1.0;
    for (std::size_t j = i; j-- > 0;) {
      p *= av.get(j + 1);
      out.set_at(i, j, p);
    }
  }
  Node n;
  n.op = Op::DecayMatrix;
  n.inputs = {a};
  n.value = std::move(out);
  return push(std::move(n));
}

NodeId Tape::gather_rows(NodeId table, std::vector<int> ids) {
  const Tensor& tv = value(table);
  if (tv.rank() != 2) throw DimensionError("gather_rows: table must be rank-2");
  std::size_t v = tv.rows(), d = tv.cols();
  Tensor out = Tensor::zeros({ids.size(), d}, tv.dtype());
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= v)
      throw DimensionError("gather_rows: id " + std::to_string(ids[t]) + " out of range " +
                           std::to_string(v));
    for (std::size_t j = 0; j < d; ++j) out.set_at(t, j, tv.at(ids[t], j));
  }
  Node n;
  n.op = Op::GatherRows;
  n.inputs = {table};
  n.ids = std::move(ids);
  n.value = std::move(out);
  return push(std::move(n));
}

NodeId Tape::cross_entropy(NodeId logits, NodeId teacher_probs) {
  const Tensor& s = value(logits);
  const Tensor& p = value(teacher_probs);
  if (!s.same_shape(p))
    throw DimensionError("cross_entropy: shape mismatch " + s.shape_str() + " vs " +
                         p.shape_str());
  if (is_trainable(teacher_probs))
    throw ConfigError("cross_entropy: teacher side must be a constant");
  std::size_t t_len = s.rows(), v = s.cols();
  Tensor soft = llamba::softmax_rows(s, false);
  double loss = 0.0;
  for (std::size_t t = 0; t < t_len; ++t) {
    double mx = s.at(t, 0);
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, s.at(t, j));
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(s.at(t, j) - mx);
    double lse = mx + std::log(z);
    for (std::size_t j = 0; j < v; ++j) loss += p.at(t, j) * (lse - s.at(t, j));
  }
  loss /= static_cast<double>(t_len);
  Node n;
  n.op = Op::CrossEntropy;
  n.inputs = {logits, teacher_probs};
  n.value = Tensor::scalar(loss, s.dtype());
  n.aux = std::move(soft);
  return push(std::move(n));
}

NodeId Tape::causal_conv(NodeId x, NodeId kernels) {
  const Tensor& xv = value(x);
  const Tensor& kv = value(kernels);
  if (xv.rank() != 2 || kv.rank() != 2 || kv.rows() != xv.cols())
    throw DimensionError("causal_conv: expects x[T x C], kernels[C x k], got " + xv.shape_str() +
                         " and " + kv.shape_str());
  std::size_t t_len = xv.rows(), ch = xv.cols(), w = kv.cols();
  Tensor out = Tensor::zeros(xv.shape(), xv.dtype());
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t c = 0; c < ch; ++c) {
      double acc = 0.0;
      for (std::size_t tau = 0; tau < w; ++tau) {
        std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) -
                             static_cast<std::ptrdiff_t>(w - 1) + static_cast<std::ptrdiff_t>(tau);
        if (src < 0) continue;
        acc += kv.at(c, tau) * xv.at(static_cast<std::size_t>(src), c);
      }
      out.set_at(t, c, acc);
    }
  Node n;
  n.op = Op::CausalConv;
  n.inputs = {x, kernels};
  n.value = std::move(out);
  return push(std::move(n));
}

NodeId Tape::record(Op op, const std::vector<NodeId>& in) {
  switch (op) {
    case Op::Add: return add(in.at(0), in.at(1));
    case Op::Mul: return mul(in.at(0), in.at(1));
    case Op::Matmul: return matmul(in.at(0), in.at(1));
    case Op::Silu: return silu(in.at(0));
    case Op::Sigmoid: return sigmoid(in.at(0));
    case Op::Exp: return exp(in.at(0));
    case Op::Sum: return sum(in.at(0));
    case Op::Mean: return mean(in.at(0));
    case Op::Transpose: return transpose(in.at(0));
    case Op::DecayMatrix: return decay_matrix(in.at(0));
    default:
      throw ConfigError("record: unsupported op kind");
  }
}

GradMap Tape::backward(NodeId loss) const {
  const Node& ln = node(loss);
  if (ln.value.size() != 1)
    throw DimensionError("backward: loss must be scalar, got " + ln.value.shape_str());

  std::vector<Tensor> g(nodes_.size());
  std::vector<bool> has(nodes_.size(), false);
  g[loss] = Tensor::full(ln.value.shape(), 1.0, ln.value.dtype());
  has[loss] = true;

  auto accum = [&](NodeId id, const Tensor& delta) {
    if (!has[id]) {
      g[id] = delta;
      has[id] = true;
    } else {
      g[id] = llamba::add(g[id], delta);
    }
  };

  for (NodeId id = loss; id >= 0; --id) {
    if (!has[id]) continue;
    const Node& n = node(id);
    const Tensor& gn = g[id];
    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::Add:
        accum(n.inputs[0], gn);
        accum(n.inputs[1], gn);
        break;
      case Op::Mul:
        accum(n.inputs[0], llamba::mul(gn, value(n.inputs[1])));
        accum(n.inputs[1], llamba::mul(gn, value(n.inputs[0])));
        break;
      case Op::Scale:
        accum(n.inputs[0], llamba::scale(gn, n.c));
        break;
      case Op::Matmul:
        accum(n.inputs[0], llamba::matmul(gn, llamba::transpose(value(n.inputs[1]))));
        accum(n.inputs[1], llamba::matmul(llamba::transpose(value(n.inputs[0])), gn));
        break;
      case Op::Silu: {
        const Tensor& x = value(n.inputs[0]);
        Tensor d = Tensor::zeros(x.shape(), x.dtype());
        for (std::size_t i = 0; i < x.size(); ++i) {
          double xv = x.get(i);
          double s = 1.0 / (1.0 + std::exp(-xv));
          d.set(i, gn.get(i) * s * (1.0 + xv * (1.0 - s)));
        }
        accum(n.inputs[0], d);
        break;
      }
      case Op::Sigmoid: {
        const Tensor& y = n.value;
        Tensor d = Tensor::zeros(y.shape(), y.dtype());
        for (std::size_t i = 0; i < y.size(); ++i)
          d.set(i, gn.get(i) * y.get(i) * (1.0 - y.get(i)));
        accum(n.inputs[0], d);
        break;
      }
      case Op::Exp:
        accum(n.inputs[0], llamba::mul(gn, n.value));
        break;
      case Op::Sum: {
        const Tensor& x = value(n.inputs[0]);
        accum(n.inputs[0], Tensor::full(x.shape(), gn.get(0), x.dtype()));
        break;
      }
      case Op::Mean: {
        const Tensor& x = value(n.inputs[0]);
        accum(n.inputs[0],
              Tensor::full(x.shape(), gn.get(0) / static_cast<double>(x.size()), x.dtype()));
        break;
      }
      case Op::Reshape:
        accum(n.inputs[0], llamba::reshape(gn, value(n.inputs[0]).shape()));
        break;
      case Op::Transpose:
        accum(n.inputs[0], llamba::transpose(gn));
        break;
      case Op::BroadcastRows: {
        const Tensor& v = value(n.inputs[0]);
        Tensor d = Tensor::zeros(v.shape(), v.dtype());
        std::size_t rows = n.value.rows(), cols = n.value.cols();
        for (std::size_t j = 0; j < cols; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < rows; ++i) s += gn.at(i, j);
          d.set(j, s);
        }
        accum(n.inputs[0], d);
        break;
      }
      case Op::BroadcastFull: {
        const Tensor& v = value(n.inputs[0]);
        accum(n.inputs[0], Tensor::full(v.shape(), llamba::sum(gn), v.dtype()));
        break;
      }
      case Op::SoftmaxRows: {
        const Tensor& y = n.value;
        std::size_t m = y.rows(), c = y.cols();
        Tensor d = Tensor::zeros(y.shape(), y.dtype());
        for (std::size_t i = 0; i < m; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += gn.at(i, j) * y.at(i, j);
          for (std::size_t j = 0; j < c; ++j)
            d.set_at(i, j, y.at(i, j) * (gn.at(i, j) - dot));
        }
        accum(n.inputs[0], d);
        break;
      }
      case Op::RmsNorm: {
        const Tensor& x = value(n.inputs[0]);
        const Tensor& w = value(n.inputs[1]);
        const Tensor& rms = n.aux;
        std::size_t t_len = x.rows(), dd = x.cols();
        Tensor dx = Tensor::zeros(x.shape(), x.dtype());
        Tensor dw = Tensor::zeros(w.shape(), w.dtype());
        for (std::size_t t = 0; t < t_len; ++t) {
          double r = rms.get(t);
          double dot = 0.0;
          for (std::size_t j = 0; j < dd; ++j) dot += w.get(j) * gn.at(t, j) * x.at(t, j);
          for (std::size_t j = 0; j < dd; ++j) {
            double v = w.get(j) * gn.at(t, j) / r -
                       x.at(t, j) * dot / (static_cast<double>(dd) * r * r * r);
            dx.set_at(t, j, v);
            dw.set(j, dw.get(j) + gn.at(t, j) * x.at(t, j) / r);
          }
        }
        accum(n.inputs[0], dx);
        accum(n.inputs[1], dw);
        break;
      }
      case Op::DecayMatrix: {
        const Tensor& a = value(n.inputs[0]);
        const Tensor& dmat = n.value;
        std::size_t t_len = a.size();
        Tensor da = Tensor::zeros(a.shape(), a.dtype());
        for (std::size_t k = 1; k < t_len; ++k) {
          double s = 0.0;
          for (std::size_t i = k; i < t_len; ++i)
            for (std::size_t j = 0; j < k; ++j) s += gn.at(i, j) * dmat.at(i, j);
          da.set(k, s / a.get(k));
        }
        accum(n.inputs[0], da);
        break;
      }
      case Op::GatherRows: {
        const Tensor& table = value(n.inputs[0]);
        Tensor d = Tensor::zeros(table.shape(), table.dtype());
        std::size_t cols = table.cols();
        for (std::size_t t = 0; t < n.ids.size(); ++t)
          for (std::size_t j = 0; j < cols; ++j)
            d.set_at(n.ids[t], j, d.at(n.ids[t], j) + gn.at(t, j));
        accum(n.inputs[0], d);
        break;
      }
      case Op::CrossEntropy: {
        const Tensor& soft = n.aux;
        const Tensor& p = value(n.inputs[1]);
        std::size_t t_len = soft.rows(), v = soft.cols();
        Tensor d = Tensor::zeros(soft.shape(), soft.dtype());
        double g0 = gn.get(0) / static_cast<double>(t_len);
        for (std::size_t t = 0; t < t_len; ++t) {
          double psum = 0.0;
          for (std::size_t j = 0; j < v; ++j) psum += p.at(t, j);
          for (std::size_t j = 0; j < v; ++j)
            d.set_at(t, j, g0 * (psum * soft.at(t, j) - p.at(t, j)));
        }
        accum(n.inputs[0], d);
        break;
      }
      case Op::CausalConv: {
        const Tensor& x = value(n.inputs[0]);
        const Tensor& k = value(n.inputs[1]);
        std::size_t t_len = x.rows(), ch = x.cols(), w = k.cols();
        Tensor dx = Tensor::zeros(x.shape(), x.dtype());
        Tensor dk = Tensor::zeros(k.shape(), k.dtype());
        for (std::size_t t = 0; t < t_len; ++t)
          for (std::size_t c = 0; c < ch; ++c) {
            double gv = gn.at(t, c);
            if (gv == 0.0) continue;
            for (std::size_t tau = 0; tau < w; ++tau) {
              std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) -
                                   static_cast<std::ptrdiff_t>(w - 1) +
                                   static_cast<std::ptrdiff_t>(tau);
              if (src < 0) continue;
              auto s = static_cast<std::size_t>(src);
              dx.set_at(s, c, dx.at(s, c) + gv * k.at(c, tau));
              dk.set_at(c, tau, dk.at(c, tau) + gv * x.at(s, c));
            }
          }
        accum(n.inputs[0], dx);
        accum(n.inputs[1], dk);
        break;
      }
    }
  }

  GradMap out;
  for (NodeId id = 0; id < static_cast<NodeId>(nodes_.size()); ++id) {
    if (!nodes_[id].trainable) continue;
    if (has[id])
      out.grads.emplace(id, std::move(g[id]));
    else
      out.grads.emplace(id, Tensor::zeros(nodes_[id].value.shape(), nodes_[id].value.dtype()));
  }
  return out;
}

}  // namespace llamba
