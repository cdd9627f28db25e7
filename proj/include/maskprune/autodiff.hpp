#pragma once

// Define-then-run computation graph with reverse-mode differentiation over
// rank-2 double tensors. The op set is the one the toy decoder, its masks,
// LoRA adapters and the distillation objective need; nothing more.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "maskprune/errors.hpp"
#include "maskprune/tensor.hpp"

namespace maskprune::ad {

using NodeId = std::size_t;

enum class Op {
  Input,
  Param,
  MatMul,
  MatMulNT,
  Add,
  Mul,
  Scale,
  Silu,
  Softmax,
  RmsNorm,
  Embedding,
  LogSoftmax,
  CrossEntropy,
  Mse,
  KlDiv,
  Sum,
  SliceCols,
  ConcatCols,
  Rope,
};

inline std::string_view op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Param: return "param";
    case Op::MatMul: return "matmul";
    case Op::MatMulNT: return "matmul_nt";
    case Op::Add: return "add";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::Silu: return "silu";
    case Op::Softmax: return "softmax";
    case Op::RmsNorm: return "rms_norm";
    case Op::Embedding: return "embedding";
    case Op::LogSoftmax: return "log_softmax";
    case Op::CrossEntropy: return "cross_entropy";
    case Op::Mse: return "mse";
    case Op::KlDiv: return "kl_div";
    case Op::Sum: return "sum";
    case Op::SliceCols: return "slice_cols";
    case Op::ConcatCols: return "concat_cols";
    case Op::Rope: return "rope";
  }
  return "?";
}

struct Node {
  Op op = Op::Input;
  std::vector<NodeId> inputs;
  std::string name;       // Input / Param only
  double scalar = 0.0;    // Scale factor, RmsNorm epsilon, Rope base
  std::size_t start = 0;  // SliceCols start, Rope head dim
  std::size_t len = 0;    // SliceCols width
  bool causal = false;    // Softmax
  bool requires_grad = false;
};

/// Operation records in topological order: a node's inputs always precede it,
/// so the graph is acyclic by construction.
class Graph {
 public:
  NodeId input(std::string name) { return leaf(Op::Input, std::move(name), false); }
  NodeId param(std::string name) { return leaf(Op::Param, std::move(name), true); }

  NodeId matmul(NodeId a, NodeId b) { return push(Op::MatMul, {a, b}); }
  /// a * b^T
  NodeId matmul_nt(NodeId a, NodeId b) { return push(Op::MatMulNT, {a, b}); }
  /// `b` may match `a` or be a 1xC row broadcast over rows.
  NodeId add(NodeId a, NodeId b) { return push(Op::Add, {a, b}); }
  /// `b` may match `a`, be a 1xC row broadcast, or a 1x1 scalar.
  NodeId mul(NodeId a, NodeId b) { return push(Op::Mul, {a, b}); }
  NodeId scale(NodeId a, double factor) {
    NodeId id = push(Op::Scale, {a});
    nodes_[id].scalar = factor;
    return id;
  }
  NodeId silu(NodeId a) { return push(Op::Silu, {a}); }
  /// Row-wise softmax; with `causal`, entry (i, j) for j > i is excluded.
  NodeId softmax(NodeId a, bool causal = false) {
    NodeId id = push(Op::Softmax, {a});
    nodes_[id].causal = causal;
    return id;
  }
  NodeId rms_norm(NodeId x, NodeId gain, double eps = 1e-6) {
    NodeId id = push(Op::RmsNorm, {x, gain});
    nodes_[id].scalar = eps;
    return id;
  }
  /// `ids` is an Nx1 tensor of integral token ids, `table` is VxD.
  NodeId embedding(NodeId ids, NodeId table) { return push(Op::Embedding, {ids, table}); }
  NodeId log_softmax(NodeId a) { return push(Op::LogSoftmax, {a}); }
  /// Mean next-token negative log-likelihood; `targets` is Nx1 integral ids.
  NodeId cross_entropy(NodeId logits, NodeId targets) {
    return push(Op::CrossEntropy, {logits, targets});
  }
  NodeId mse(NodeId a, NodeId b) { return push(Op::Mse, {a, b}); }
  /// Mean over rows of KL(softmax(p) || softmax(q)).
  NodeId kl_div(NodeId p_logits, NodeId q_logits) { return push(Op::KlDiv, {p_logits, q_logits}); }
  NodeId sum(NodeId a) { return push(Op::Sum, {a}); }
  NodeId slice_cols(NodeId a, std::size_t start, std::size_t len) {
    NodeId id = push(Op::SliceCols, {a});
    nodes_[id].start = start;
    nodes_[id].len = len;
    return id;
  }
  NodeId concat_cols(std::vector<NodeId> parts) { return push(Op::ConcatCols, std::move(parts)); }
  /// Rotary position embedding applied independently to each `head_dim`-wide
  /// column block; row index is the position.
  NodeId rope(NodeId a, std::size_t head_dim, double base = 10000.0) {
    if (head_dim == 0 || head_dim % 2 != 0) throw GraphError("rope: head_dim must be even");
    NodeId id = push(Op::Rope, {a});
    nodes_[id].start = head_dim;
    nodes_[id].scalar = base;
    return id;
  }

  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  std::vector<NodeId> parameters() const {
    std::vector<NodeId> out;
    for (NodeId i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].op == Op::Param) out.push_back(i);
    }
    return out;
  }

  std::optional<NodeId> find(const std::string& name) const {
    auto it = names_.find(name);
    if (it == names_.end()) return std::nullopt;
    return it->second;
  }

 private:
  NodeId leaf(Op op, std::string name, bool trainable) {
    if (names_.count(name)) throw GraphError("duplicate leaf name '" + name + "'");
    Node n;
    n.op = op;
    n.name = name;
    n.requires_grad = trainable;
    nodes_.push_back(std::move(n));
    names_.emplace(std::move(name), nodes_.size() - 1);
    return nodes_.size() - 1;
  }

  NodeId push(Op op, std::vector<NodeId> inputs) {
    Node n;
    n.op = op;
    for (NodeId in : inputs) {
      if (in >= nodes_.size()) throw GraphError("input node does not precede its consumer");
      n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
    }
    n.inputs = std::move(inputs);
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  std::vector<Node> nodes_;
  std::unordered_map<std::string, NodeId> names_;
};

/// Name -> tensor for Input/Param leaves. Bound tensors are referenced, not
/// copied: they must outlive every Evaluation produced from these bindings.
class Bindings {
 public:
  Bindings& bind(const std::string& name, const Tensor& t) {
    refs_[name] = &t;
    return *this;
  }
  /// Keeps its own copy; for small per-call tensors such as token ids.
  Bindings& own(const std::string& name, Tensor t) {
    owned_[name] = std::move(t);
    refs_[name] = &owned_[name];
    return *this;
  }
  const Tensor* find(const std::string& name) const {
    auto it = refs_.find(name);
    return it == refs_.end() ? nullptr : it->second;
  }

 private:
  std::unordered_map<std::string, const Tensor*> refs_;
  std::map<std::string, Tensor> owned_;
};

/// Node values from one forward pass, indexed by node id.
class Evaluation {
 public:
  const Tensor& value(NodeId id) const { return *ptr_.at(id); }
  std::size_t size() const { return ptr_.size(); }

 private:
  friend Evaluation forward(const Graph&, const Bindings&);
  std::vector<Tensor> owned_;
  std::vector<const Tensor*> ptr_;
};

namespace detail {

inline const char* kind_of(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return "same";
  if (b.rows() == 1 && b.cols() == 1) return "scalar";
  if (b.rows() == 1 && b.cols() == a.cols()) return "row";
  return nullptr;
}

inline std::size_t token_id(double v, std::size_t vocab, const char* what) {
  if (!(v >= 0.0) || v != std::floor(v) || v >= static_cast<double>(vocab)) {
    throw RangeError(std::string(what) + ": token id " + std::to_string(v) +
                     " outside [0, " + std::to_string(vocab) + ")");
  }
  return static_cast<std::size_t>(v);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Row-wise log-softmax with optional causal exclusion (excluded entries get -inf).
inline Tensor log_softmax_rows(const Tensor& x, bool causal = false) {
  const std::size_t n = x.rows(), c = x.cols();
  Tensor out({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    const auto lim = static_cast<Eigen::Index>(causal ? std::min(c, i + 1) : c);
    Eigen::Map<const Eigen::ArrayXd> row(x.data().data() + i * c, lim);
    Eigen::Map<Eigen::ArrayXd> dst(out.data().data() + i * c, static_cast<Eigen::Index>(c));
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row - mx).exp().sum());
    dst.head(lim) = row - lse;
    dst.tail(static_cast<Eigen::Index>(c) - lim) = -std::numeric_limits<double>::infinity();
  }
  return out;
}

inline Tensor softmax_rows(const Tensor& x, bool causal = false) {
  const std::size_t n = x.rows(), c = x.cols();
  Tensor out({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    const auto lim = static_cast<Eigen::Index>(causal ? std::min(c, i + 1) : c);
    Eigen::Map<const Eigen::ArrayXd> row(x.data().data() + i * c, lim);
    Eigen::Map<Eigen::ArrayXd> dst(out.data().data() + i * c, lim);
    dst = (row - row.maxCoeff()).exp();
    dst /= dst.sum();
  }
  return out;
}

struct RopeTable {
  std::vector<double> cos, sin;  // [pos * half + p]
  std::size_t half = 0;
};

inline RopeTable rope_table(std::size_t rows, std::size_t head_dim, double base) {
  RopeTable t;
  t.half = head_dim / 2;
  t.cos.resize(rows * t.half);
  t.sin.resize(rows * t.half);
  for (std::size_t pos = 0; pos < rows; ++pos) {
    for (std::size_t p = 0; p < t.half; ++p) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(p) / head_dim);
      const double theta = static_cast<double>(pos) * freq;
      t.cos[pos * t.half + p] = std::cos(theta);
      t.sin[pos * t.half + p] = std::sin(theta);
    }
  }
  return t;
}

inline Tensor rope_apply(const Tensor& x, std::size_t head_dim, double base, bool inverse) {
  if (x.cols() % head_dim != 0) throw ShapeError("rope: width not a multiple of head_dim");
  const RopeTable tab = rope_table(x.rows(), head_dim, base);
  const double sgn = inverse ? -1.0 : 1.0;
  Tensor out({x.rows(), x.cols()});
  for (std::size_t pos = 0; pos < x.rows(); ++pos) {
    for (std::size_t h0 = 0; h0 < x.cols(); h0 += head_dim) {
      for (std::size_t p = 0; p < tab.half; ++p) {
        const double c = tab.cos[pos * tab.half + p];
        const double s = sgn * tab.sin[pos * tab.half + p];
        const double a = x(pos, h0 + 2 * p), b = x(pos, h0 + 2 * p + 1);
        out(pos, h0 + 2 * p) = a * c - b * s;
        out(pos, h0 + 2 * p + 1) = a * s + b * c;
      }
    }
  }
  return out;
}

inline Tensor compute(const Node& n, const std::vector<const Tensor*>& in) {
  switch (n.op) {
    case Op::Input:
    case Op::Param:
      throw GraphError("leaf nodes are bound, not computed");

    case Op::MatMul:
      return maskprune::matmul(*in[0], *in[1]);

    case Op::MatMulNT: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
      }
      Tensor out({a.rows(), b.rows()});
      out.mat().noalias() = a.mat() * b.mat().transpose();
      return out;
    }

    case Op::Add: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      const char* k = kind_of(a, b);
      if (!k || std::string_view(k) == "scalar" && a.size() != 1) {
        throw ShapeError("add: " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
      }
      Tensor out = a;
      if (a.shape() == b.shape()) {
        out += b;
      } else {
        for (std::size_t i = 0; i < a.rows(); ++i)
          for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) += b(0, j);
      }
      return out;
    }

    case Op::Mul: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      const char* k = kind_of(a, b);
      if (!k) throw ShapeError("mul: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
      Tensor out = a;
      const std::string_view kind(k);
      if (kind == "same") {
        for (std::size_t i = 0; i < a.size(); ++i) out[i] *= b[i];
      } else if (kind == "scalar") {
        out *= b[0];
      } else {
        for (std::size_t i = 0; i < a.rows(); ++i)
          for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) *= b(0, j);
      }
      return out;
    }

    case Op::Scale: {
      Tensor out = *in[0];
      out *= n.scalar;
      return out;
    }

    case Op::Silu: {
      Tensor out = *in[0];
      auto a = out.mat().array();
      a = a / (1.0 + (-a).exp());
      return out;
    }

    case Op::Softmax:
      return softmax_rows(*in[0], n.causal);

    case Op::RmsNorm: {
      const Tensor& x = *in[0];
      const Tensor& g = *in[1];
      if (g.rows() != 1 || g.cols() != x.cols()) throw ShapeError("rms_norm: gain shape");
      Tensor out({x.rows(), x.cols()});
      for (std::size_t i = 0; i < x.rows(); ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) ss += x(i, j) * x(i, j);
        const double inv = 1.0 / std::sqrt(ss / x.cols() + n.scalar);
        for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = x(i, j) * inv * g(0, j);
      }
      return out;
    }

    case Op::Embedding: {
      const Tensor& ids = *in[0];
      const Tensor& table = *in[1];
      if (ids.cols() != 1) throw ShapeError("embedding: ids must be Nx1");
      Tensor out({ids.rows(), table.cols()});
      for (std::size_t i = 0; i < ids.rows(); ++i) {
        const std::size_t id = token_id(ids(i, 0), table.rows(), "embedding");
        auto src = table.row_span(id);
        std::copy(src.begin(), src.end(), out.row_span(i).begin());
      }
      return out;
    }

    case Op::LogSoftmax:
      return log_softmax_rows(*in[0]);

    case Op::CrossEntropy: {
      const Tensor& x = *in[0];
      const Tensor& t = *in[1];
      if (t.cols() != 1 || t.rows() != x.rows()) throw ShapeError("cross_entropy: targets shape");
      const Tensor ls = log_softmax_rows(x);
      double acc = 0.0;
      for (std::size_t i = 0; i < x.rows(); ++i) {
        acc -= ls(i, token_id(t(i, 0), x.cols(), "cross_entropy"));
      }
      return Tensor::scalar(acc / static_cast<double>(x.rows()));
    }

    case Op::Mse: {
      in[0]->require_same_shape(*in[1], "mse");
      double acc = 0.0;
      for (std::size_t i = 0; i < in[0]->size(); ++i) {
        const double d = (*in[0])[i] - (*in[1])[i];
        acc += d * d;
      }
      return Tensor::scalar(acc / static_cast<double>(in[0]->size()));
    }

    case Op::KlDiv: {
      in[0]->require_same_shape(*in[1], "kl_div");
      const Tensor lp = log_softmax_rows(*in[0]);
      const Tensor lq = log_softmax_rows(*in[1]);
      double acc = 0.0;
      for (std::size_t i = 0; i < lp.rows(); ++i) {
        for (std::size_t j = 0; j < lp.cols(); ++j) {
          acc += std::exp(lp(i, j)) * (lp(i, j) - lq(i, j));
        }
      }
      return Tensor::scalar(acc / static_cast<double>(lp.rows()));
    }

    case Op::Sum: {
      double acc = 0.0;
      for (double v : in[0]->data()) acc += v;
      return Tensor::scalar(acc);
    }

    case Op::SliceCols: {
      const Tensor& a = *in[0];
      if (n.start + n.len > a.cols()) throw ShapeError("slice_cols out of range");
      Tensor out({a.rows(), n.len});
      for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < n.len; ++j) out(i, j) = a(i, n.start + j);
      return out;
    }

    case Op::ConcatCols: {
      std::size_t width = 0;
      const std::size_t rows = in.front()->rows();
      for (const Tensor* t : in) {
        if (t->rows() != rows) throw ShapeError("concat_cols: row mismatch");
        width += t->cols();
      }
      Tensor out({rows, width});
      std::size_t off = 0;
      for (const Tensor* t : in) {
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < t->cols(); ++j) out(i, off + j) = (*t)(i, j);
        off += t->cols();
      }
      return out;
    }

    case Op::Rope:
      return rope_apply(*in[0], n.start, n.scalar, false);
  }
  throw GraphError("unknown op");
}

/// Accumulates the contribution of node `n` into the gradients of its inputs.
/// `gin[k]` is null when input k does not require a gradient.
inline void propagate(const Node& n, const std::vector<const Tensor*>& in, const Tensor& out,
                      const Tensor& g, const std::vector<Tensor*>& gin) {
  auto acc = [](Tensor* dst, const Tensor& src) {
    if (dst) *dst += src;
  };
  switch (n.op) {
    case Op::Input:
    case Op::Param:
      return;

    case Op::MatMul:
      if (gin[0]) gin[0]->mat().noalias() += g.mat() * in[1]->mat().transpose();
      if (gin[1]) gin[1]->mat().noalias() += in[0]->mat().transpose() * g.mat();
      return;

    case Op::MatMulNT:
      if (gin[0]) gin[0]->mat().noalias() += g.mat() * in[1]->mat();
      if (gin[1]) gin[1]->mat().noalias() += g.mat().transpose() * in[0]->mat();
      return;

    case Op::Add:
      acc(gin[0], g);
      if (gin[1]) {
        if (in[1]->shape() == in[0]->shape()) {
          *gin[1] += g;
        } else {
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) (*gin[1])(0, j) += g(i, j);
        }
      }
      return;

    case Op::Mul: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      const std::string_view kind(kind_of(a, b));
      if (kind == "same") {
        if (gin[0]) for (std::size_t i = 0; i < a.size(); ++i) (*gin[0])[i] += g[i] * b[i];
        if (gin[1]) for (std::size_t i = 0; i < a.size(); ++i) (*gin[1])[i] += g[i] * a[i];
      } else if (kind == "scalar") {
        if (gin[0]) for (std::size_t i = 0; i < a.size(); ++i) (*gin[0])[i] += g[i] * b[0];
        if (gin[1]) {
          double s = 0.0;
          for (std::size_t i = 0; i < a.size(); ++i) s += g[i] * a[i];
          (*gin[1])[0] += s;
        }
      } else {
        for (std::size_t i = 0; i < a.rows(); ++i) {
          for (std::size_t j = 0; j < a.cols(); ++j) {
            if (gin[0]) (*gin[0])(i, j) += g(i, j) * b(0, j);
            if (gin[1]) (*gin[1])(0, j) += g(i, j) * a(i, j);
          }
        }
      }
      return;
    }

    case Op::Scale:
      if (gin[0]) for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += n.scalar * g[i];
      return;

    case Op::Silu:
      if (gin[0]) {
        const auto x = in[0]->mat().array();
        const auto s = (1.0 + (-x).exp()).inverse().eval();
        gin[0]->mat().array() += g.mat().array() * s * (1.0 + x * (1.0 - s));
      }
      return;

    case Op::Softmax:
      if (gin[0]) {
        for (std::size_t i = 0; i < out.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < out.cols(); ++j) dot += out(i, j) * g(i, j);
          for (std::size_t j = 0; j < out.cols(); ++j) (*gin[0])(i, j) += out(i, j) * (g(i, j) - dot);
        }
      }
      return;

    case Op::RmsNorm: {
      const Tensor& x = *in[0];
      const Tensor& gain = *in[1];
      const double d = static_cast<double>(x.cols());
      for (std::size_t i = 0; i < x.rows(); ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) ss += x(i, j) * x(i, j);
        const double inv = 1.0 / std::sqrt(ss / d + n.scalar);
        double dot = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) dot += g(i, j) * gain(0, j) * x(i, j);
        for (std::size_t j = 0; j < x.cols(); ++j) {
          if (gin[0]) {
            (*gin[0])(i, j) += gain(0, j) * g(i, j) * inv - x(i, j) * inv * inv * inv * dot / d;
          }
          if (gin[1]) (*gin[1])(0, j) += g(i, j) * x(i, j) * inv;
        }
      }
      return;
    }

    case Op::Embedding:
      if (gin[1]) {
        const Tensor& ids = *in[0];
        for (std::size_t i = 0; i < ids.rows(); ++i) {
          auto dst = gin[1]->row_span(static_cast<std::size_t>(ids(i, 0)));
          auto src = g.row_span(i);
          for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
        }
      }
      return;

    case Op::LogSoftmax:
      if (gin[0]) {
        for (std::size_t i = 0; i < out.rows(); ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < out.cols(); ++j) s += g(i, j);
          for (std::size_t j = 0; j < out.cols(); ++j) {
            (*gin[0])(i, j) += g(i, j) - std::exp(out(i, j)) * s;
          }
        }
      }
      return;

    case Op::CrossEntropy:
      if (gin[0]) {
        const Tensor p = softmax_rows(*in[0]);
        const double scale = g[0] / static_cast<double>(p.rows());
        for (std::size_t i = 0; i < p.rows(); ++i) {
          const auto t = static_cast<std::size_t>((*in[1])(i, 0));
          for (std::size_t j = 0; j < p.cols(); ++j) {
            (*gin[0])(i, j) += scale * (p(i, j) - (j == t ? 1.0 : 0.0));
          }
        }
      }
      return;

    case Op::Mse: {
      const double scale = 2.0 * g[0] / static_cast<double>(in[0]->size());
      for (std::size_t i = 0; i < in[0]->size(); ++i) {
        const double d = scale * ((*in[0])[i] - (*in[1])[i]);
        if (gin[0]) (*gin[0])[i] += d;
        if (gin[1]) (*gin[1])[i] -= d;
      }
      return;
    }

    case Op::KlDiv: {
      const Tensor lp = log_softmax_rows(*in[0]);
      const Tensor lq = log_softmax_rows(*in[1]);
      const double scale = g[0] / static_cast<double>(lp.rows());
      for (std::size_t i = 0; i < lp.rows(); ++i) {
        double row_kl = 0.0;
        for (std::size_t j = 0; j < lp.cols(); ++j) {
          row_kl += std::exp(lp(i, j)) * (lp(i, j) - lq(i, j));
        }
        for (std::size_t j = 0; j < lp.cols(); ++j) {
          const double p = std::exp(lp(i, j));
          if (gin[0]) (*gin[0])(i, j) += scale * p * (lp(i, j) - lq(i, j) - row_kl);
          if (gin[1]) (*gin[1])(i, j) += scale * (std::exp(lq(i, j)) - p);
        }
      }
      return;
    }

    case Op::Sum:
      if (gin[0]) for (double& v : gin[0]->data()) v += g[0];
      return;

    case Op::SliceCols:
      if (gin[0]) {
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < n.len; ++j) (*gin[0])(i, n.start + j) += g(i, j);
      }
      return;

    case Op::ConcatCols: {
      std::size_t off = 0;
      for (std::size_t k = 0; k < in.size(); ++k) {
        if (gin[k]) {
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < in[k]->cols(); ++j) (*gin[k])(i, j) += g(i, off + j);
        }
        off += in[k]->cols();
      }
      return;
    }

    case Op::Rope:
      if (gin[0]) *gin[0] += rope_apply(g, n.start, n.scalar, true);
      return;
  }
  throw GraphError("no derivative registered for op");
}

}  // namespace detail

/// Evaluates every node in order. Throws on unbound leaves, shape mismatches
/// and non-finite intermediates.
inline Evaluation forward(const Graph& graph, const Bindings& bindings) {
  Evaluation ev;
  ev.owned_.resize(graph.size());
  ev.ptr_.resize(graph.size(), nullptr);
  std::vector<const Tensor*> args;
  for (NodeId id = 0; id < graph.size(); ++id) {
    const Node& n = graph.node(id);
    if (n.op == Op::Input || n.op == Op::Param) {
      const Tensor* t = bindings.find(n.name);
      if (!t) throw GraphError("unbound placeholder '" + n.name + "'");
      if (!t->all_finite()) throw NumericalError("non-finite value bound to '" + n.name + "'");
      ev.ptr_[id] = t;
      continue;
    }
    args.clear();
    for (NodeId in : n.inputs) args.push_back(ev.ptr_[in]);
    try {
      ev.owned_[id] = detail::compute(n, args);
    } catch (const ShapeError& e) {
      throw ShapeError("node " + std::to_string(id) + " (" + std::string(op_name(n.op)) +
                       "): " + e.what());
    }
    if (!ev.owned_[id].all_finite()) {
      throw NumericalError("non-finite output at node " + std::to_string(id) + " (" +
                           std::string(op_name(n.op)) + ")");
    }
    ev.ptr_[id] = &ev.owned_[id];
  }
  return ev;
}

/// Gradients of a scalar node with respect to every Param node. Parameters the
/// loss does not reach get zero tensors.
inline std::map<NodeId, Tensor> backward(const Graph& graph, const Evaluation& ev, NodeId loss) {
  if (loss >= graph.size()) throw GraphError("loss node out of range");
  if (ev.value(loss).size() != 1) {
    throw GraphError("backward needs a scalar loss, got " + shape_str(ev.value(loss).shape()));
  }
  std::vector<Tensor> grads(loss + 1);
  std::vector<bool> live(loss + 1, false);
  if (graph.node(loss).requires_grad) {
    grads[loss] = Tensor(ev.value(loss).shape(), 1.0);
    live[loss] = true;
  }
  std::vector<const Tensor*> args;
  std::vector<Tensor*> gin;
  for (NodeId id = loss + 1; id-- > 0;) {
    if (!live[id]) continue;
    const Node& n = graph.node(id);
    args.clear();
    gin.clear();
    for (NodeId in : n.inputs) {
      args.push_back(&ev.value(in));
      if (graph.node(in).requires_grad) {
        if (!live[in]) {
          grads[in] = Tensor(ev.value(in).shape());
          live[in] = true;
        }
        gin.push_back(&grads[in]);
      } else {
        gin.push_back(nullptr);
      }
    }
    detail::propagate(n, args, ev.value(id), grads[id], gin);
  }
  std::map<NodeId, Tensor> out;
  for (NodeId p : graph.parameters()) {
    if (p <= loss && live[p]) {
      out.emplace(p, std::move(grads[p]));
    } else {
      out.emplace(p, Tensor(ev.value(p).shape()));
    }
  }
  return out;
}

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
inline Tensor finite_diff(const std::function<double(const Tensor&)>& f, const Tensor& x,
                          double eps) {
  if (!(eps > 0.0)) throw RangeError("finite_diff: eps must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = f(probe);
    probe[i] = orig - eps;
    const double down = f(probe);
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericalError("finite_diff: non-finite function value");
    }
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

/// ||a - b||_2 / max(||b||_2, floor): the gradient-check metric.
inline double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-12) {
  a.require_same_shape(b, "relative_error");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), floor);
}

}  // namespace maskprune::ad
