#pragma once

// Desk-scale LLaMA-style decoder (RMSNorm, RoPE, causal attention, SiLU-gated
// FFN, no biases) with a continuous mask per attention head and per FFN
// channel, and optional LoRA adapters on every projection.
//
// Row-vector convention: activations are (tokens x features) and a projection
// is `X * W` with W of shape (in x out). Head j owns columns [j*d_h, (j+1)*d_h)
// of W_Q/W_K/W_V and the same rows of W_O; FFN channel c owns column c of
// W_gate/W_up and row c of W_down.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "maskprune/autodiff.hpp"
#include "maskprune/errors.hpp"
#include "maskprune/tensor.hpp"

namespace maskprune {

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t head_dim = 16;
  std::size_t hidden = 64;
  std::size_t ffn = 172;
  std::size_t vocab = 256;
  std::size_t seq_len = 128;

  std::size_t inner() const { return heads * head_dim; }

  /// Holds for dense and pruned models alike: the attention width may shrink
  /// below the hidden size once heads are removed.
  void validate() const {
    if (!layers || !heads || !head_dim || !hidden || !ffn || !vocab || !seq_len) {
      throw ConfigError("model config: every dimension must be >= 1");
    }
    if (heads * head_dim > hidden) {
      throw ConfigError("model config: heads * head_dim must not exceed hidden");
    }
    if (head_dim % 2 != 0) throw ConfigError("model config: head_dim must be even (rotary)");
  }

  /// A dense model that can be pruned: heads * head_dim == hidden and enough
  /// FFN channels that 50% pruning leaves at least one unit per group.
  void validate_dense() const {
    validate();
    if (heads * head_dim != hidden) {
      throw ConfigError("model config: heads * head_dim must equal hidden");
    }
    if (ffn < heads) throw ConfigError("model config: ffn must be >= heads");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// The seven adapted projections of a decoder layer.
enum class Proj : std::uint8_t { Q, K, V, O, Gate, Up, Down };
inline constexpr std::array<Proj, 7> kAllProj = {Proj::Q,    Proj::K,  Proj::V,   Proj::O,
                                                 Proj::Gate, Proj::Up, Proj::Down};

inline const char* proj_name(Proj p) {
  switch (p) {
    case Proj::Q: return "wq";
    case Proj::K: return "wk";
    case Proj::V: return "wv";
    case Proj::O: return "wo";
    case Proj::Gate: return "w_gate";
    case Proj::Up: return "w_up";
    case Proj::Down: return "w_down";
  }
  return "?";
}

struct LayerParams {
  Tensor attn_norm;  // 1 x hidden
  Tensor wq, wk, wv;  // hidden x (heads*head_dim)
  Tensor wo;          // (heads*head_dim) x hidden
  Tensor ffn_norm;    // 1 x hidden
  Tensor w_gate, w_up;  // hidden x ffn
  Tensor w_down;        // ffn x hidden

  Tensor& weight(Proj p) {
    switch (p) {
      case Proj::Q: return wq;
      case Proj::K: return wk;
      case Proj::V: return wv;
      case Proj::O: return wo;
      case Proj::Gate: return w_gate;
      case Proj::Up: return w_up;
      case Proj::Down: return w_down;
    }
    throw RangeError("bad projection");
  }
  const Tensor& weight(Proj p) const { return const_cast<LayerParams*>(this)->weight(p); }
};

inline std::string layer_key(std::size_t l, const char* what) {
  return "layers." + std::to_string(l) + "." + what;
}

struct ModelParams {
  ModelConfig config;
  Tensor embed;  // vocab x hidden
  std::vector<LayerParams> layers;
  Tensor final_norm;  // 1 x hidden
  Tensor lm_head;     // hidden x vocab

  /// Visits every tensor with its stable checkpoint/binding name.
  template <class Fn>
  void for_each(Fn&& fn) {
    fn(std::string("embed"), embed);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      LayerParams& lp = layers[l];
      fn(layer_key(l, "attn_norm"), lp.attn_norm);
      for (Proj p : kAllProj) fn(layer_key(l, proj_name(p)), lp.weight(p));
      fn(layer_key(l, "ffn_norm"), lp.ffn_norm);
    }
    fn(std::string("final_norm"), final_norm);
    fn(std::string("lm_head"), lm_head);
  }
  template <class Fn>
  void for_each(Fn&& fn) const {
    const_cast<ModelParams*>(this)->for_each(
        [&](const std::string& name, Tensor& t) { fn(name, static_cast<const Tensor&>(t)); });
  }

  std::size_t count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate_dense();
    std::mt19937_64 rng(seed);
    const std::size_t inner = cfg.heads * cfg.head_dim;
    const double in_std = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
    const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.layers));
    ModelParams p;
    p.config = cfg;
    p.embed = Tensor::randn(cfg.vocab, cfg.hidden, 1.0, rng);
    p.layers.resize(cfg.layers);
    for (LayerParams& lp : p.layers) {
      lp.attn_norm = Tensor({1, cfg.hidden}, 1.0);
      lp.wq = Tensor::randn(cfg.hidden, inner, in_std, rng);
      lp.wk = Tensor::randn(cfg.hidden, inner, in_std, rng);
      lp.wv = Tensor::randn(cfg.hidden, inner, in_std, rng);
      lp.wo = Tensor::randn(inner, cfg.hidden, out_scale / std::sqrt(double(inner)), rng);
      lp.ffn_norm = Tensor({1, cfg.hidden}, 1.0);
      lp.w_gate = Tensor::randn(cfg.hidden, cfg.ffn, in_std, rng);
      lp.w_up = Tensor::randn(cfg.hidden, cfg.ffn, in_std, rng);
      lp.w_down = Tensor::randn(cfg.ffn, cfg.hidden, out_scale / std::sqrt(double(cfg.ffn)), rng);
    }
    p.final_norm = Tensor({1, cfg.hidden}, 1.0);
    p.lm_head = Tensor::randn(cfg.hidden, cfg.vocab, in_std, rng);
    return p;
  }
};

/// Continuous masks: one 1 x heads row and one 1 x ffn row per layer.
struct MaskSet {
  std::vector<Tensor> head;
  std::vector<Tensor> inter;

  static MaskSet ones(const ModelConfig& cfg) {
    MaskSet m;
    m.head.assign(cfg.layers, Tensor({1, cfg.heads}, 1.0));
    m.inter.assign(cfg.layers, Tensor({1, cfg.ffn}, 1.0));
    return m;
  }

  std::size_t layers() const { return head.size(); }

  void clamp() {
    for (auto* group : {&head, &inter})
      for (Tensor& t : *group)
        for (double& v : t.data()) v = std::clamp(v, 0.0, 1.0);
  }

  bool in_unit_range() const {
    for (const auto* group : {&head, &inter})
      for (const Tensor& t : *group)
        for (double v : t.data())
          if (!(v >= 0.0 && v <= 1.0)) return false;
    return true;
  }

  void check(const ModelConfig& cfg) const {
    if (head.size() != cfg.layers || inter.size() != cfg.layers) {
      throw ShapeError("mask set layer count does not match model");
    }
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      if (head[l].shape() != Shape{1, cfg.heads} || inter[l].shape() != Shape{1, cfg.ffn}) {
        throw ShapeError("mask set dimensions do not match model at layer " + std::to_string(l));
      }
    }
  }
};

struct LoraPair {
  Tensor b;  // in x r
  Tensor a;  // r x out
};

/// Adapter pairs for every projection of every layer. Empty when unused.
struct LoraSet {
  std::size_t rank = 0;
  std::vector<std::array<LoraPair, 7>> layers;

  bool empty() const { return layers.empty(); }

  LoraPair& at(std::size_t l, Proj p) { return layers.at(l)[static_cast<std::size_t>(p)]; }
  const LoraPair& at(std::size_t l, Proj p) const {
    return layers.at(l)[static_cast<std::size_t>(p)];
  }

  /// B = 0 and A ~ N(0, a_std): the adapted model starts at the base model.
  static LoraSet init(const ModelParams& params, std::size_t rank, double a_std,
                      std::uint64_t seed) {
    if (rank == 0) throw RangeError("lora rank must be >= 1");
    std::mt19937_64 rng(seed);
    LoraSet s;
    s.rank = rank;
    s.layers.resize(params.layers.size());
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
      for (Proj p : kAllProj) {
        const Tensor& w = params.layers[l].weight(p);
        if (rank >= std::min(w.rows(), w.cols())) {
          throw RangeError("lora rank must be below min(rows, cols) of " +
                           std::string(proj_name(p)));
        }
        LoraPair& pair = s.at(l, p);
        pair.b = Tensor::zeros(w.rows(), rank);
        pair.a = Tensor::randn(rank, w.cols(), a_std, rng);
      }
    }
    return s;
  }

  template <class Fn>
  void for_each(Fn&& fn) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      for (Proj p : kAllProj) {
        const std::string base = "lora." + std::to_string(l) + "." + proj_name(p);
        fn(base + ".B", at(l, p).b);
        fn(base + ".A", at(l, p).a);
      }
    }
  }
  template <class Fn>
  void for_each(Fn&& fn) const {
    const_cast<LoraSet*>(this)->for_each(
        [&](const std::string& name, Tensor& t) { fn(name, static_cast<const Tensor&>(t)); });
  }
};

/// W + B * A.
inline Tensor apply_lora(const Tensor& w, const LoraPair& adapter) {
  if (adapter.b.cols() != adapter.a.rows()) {
    throw ShapeError("lora rank mismatch: B is " + shape_str(adapter.b.shape()) + ", A is " +
                     shape_str(adapter.a.shape()));
  }
  if (adapter.b.rows() != w.rows() || adapter.a.cols() != w.cols()) {
    throw ShapeError("lora adapter " + shape_str(adapter.b.shape()) + "*" +
                     shape_str(adapter.a.shape()) + " does not fit weight " +
                     shape_str(w.shape()));
  }
  Tensor out = w;
  out.mat().noalias() += adapter.b.mat() * adapter.a.mat();
  return out;
}

/// What the builder puts in the graph and which leaves are trainable.
struct BuildOptions {
  bool masks = true;
  bool lora = true;
  bool train_weights = false;
  bool train_masks = true;
  bool train_lora = true;
};

inline std::string mask_head_key(std::size_t l) { return "mask.head." + std::to_string(l); }
inline std::string mask_inter_key(std::size_t l) { return "mask.inter." + std::to_string(l); }
inline std::string lora_key(std::size_t l, Proj p, const char* which) {
  return "lora." + std::to_string(l) + "." + proj_name(p) + "." + which;
}

/// Emits decoder sub-blocks into a graph. Leaves are created lazily and
/// shared, so one builder can assemble a full model or a single sub-layer.
class DecoderBuilder {
 public:
  DecoderBuilder(ad::Graph& g, const ModelConfig& cfg, BuildOptions opt)
      : g_(g), cfg_(cfg), opt_(opt) {}

  ad::NodeId weight(std::size_t l, Proj p) {
    ad::NodeId w = leaf(layer_key(l, proj_name(p)), opt_.train_weights);
    if (!opt_.lora) return w;
    ad::NodeId b = leaf(lora_key(l, p, "B"), opt_.train_lora);
    ad::NodeId a = leaf(lora_key(l, p, "A"), opt_.train_lora);
    return g_.add(w, g_.matmul(b, a));
  }

  /// Masked multi-head causal self-attention on an already-normalized input,
  /// including the output projection.
  ad::NodeId attention(std::size_t l, ad::NodeId h) {
    const std::size_t dh = cfg_.head_dim;
    ad::NodeId q = g_.rope(g_.matmul(h, weight(l, Proj::Q)), dh);
    ad::NodeId k = g_.rope(g_.matmul(h, weight(l, Proj::K)), dh);
    ad::NodeId v = g_.matmul(h, weight(l, Proj::V));
    ad::NodeId mask = opt_.masks ? leaf(mask_head_key(l), opt_.train_masks) : 0;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<ad::NodeId> heads;
    for (std::size_t j = 0; j < cfg_.heads; ++j) {
      ad::NodeId qj = g_.slice_cols(q, j * dh, dh);
      ad::NodeId kj = g_.slice_cols(k, j * dh, dh);
      ad::NodeId vj = g_.slice_cols(v, j * dh, dh);
      ad::NodeId att = g_.softmax(g_.scale(g_.matmul_nt(qj, kj), inv_sqrt), true);
      ad::NodeId oj = g_.matmul(att, vj);
      if (opt_.masks) oj = g_.mul(oj, g_.slice_cols(mask, j, 1));
      heads.push_back(oj);
    }
    return g_.matmul(g_.concat_cols(std::move(heads)), weight(l, Proj::O));
  }

  /// Masked SiLU-gated FFN on an already-normalized input.
  ad::NodeId ffn(std::size_t l, ad::NodeId h) {
    ad::NodeId gate = g_.silu(g_.matmul(h, weight(l, Proj::Gate)));
    ad::NodeId act = g_.mul(gate, g_.matmul(h, weight(l, Proj::Up)));
    if (opt_.masks) act = g_.mul(act, leaf(mask_inter_key(l), opt_.train_masks));
    return g_.matmul(act, weight(l, Proj::Down));
  }

  /// Pre-norm residual block; returns the post-block residual stream.
  ad::NodeId block(std::size_t l, ad::NodeId x) {
    ad::NodeId h = g_.rms_norm(x, leaf(layer_key(l, "attn_norm"), opt_.train_weights));
    x = g_.add(x, attention(l, h));
    ad::NodeId h2 = g_.rms_norm(x, leaf(layer_key(l, "ffn_norm"), opt_.train_weights));
    return g_.add(x, ffn(l, h2));
  }

  ad::NodeId leaf(const std::string& name, bool trainable) {
    if (auto id = g_.find(name)) return *id;
    return trainable ? g_.param(name) : g_.input(name);
  }

 private:
  ad::Graph& g_;
  const ModelConfig& cfg_;
  BuildOptions opt_;
};

/// Whole decoder graph for a fixed sequence length.
struct LmGraph {
  ad::Graph graph;
  ModelConfig config;
  BuildOptions options;
  std::size_t length = 0;
  ad::NodeId tokens = 0;
  ad::NodeId logits = 0;
  std::vector<ad::NodeId> hiddens;

  LmGraph(const ModelConfig& cfg, std::size_t len, BuildOptions opt)
      : config(cfg), options(opt), length(len) {
    if (len == 0 || len > cfg.seq_len) {
      throw RangeError("sequence length " + std::to_string(len) + " outside [1, " +
                       std::to_string(cfg.seq_len) + "]");
    }
    DecoderBuilder b(graph, config, options);
    tokens = graph.input("tokens");
    ad::NodeId x = graph.embedding(tokens, b.leaf("embed", opt.train_weights));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      x = b.block(l, x);
      hiddens.push_back(x);
    }
    ad::NodeId h = graph.rms_norm(x, b.leaf("final_norm", opt.train_weights));
    logits = graph.matmul(h, b.leaf("lm_head", opt.train_weights));
  }
};

inline Tensor token_column(std::span<const int> tokens) {
  Tensor t({tokens.size(), 1});
  for (std::size_t i = 0; i < tokens.size(); ++i) t(i, 0) = static_cast<double>(tokens[i]);
  return t;
}

inline void bind_params(ad::Bindings& b, const ModelParams& p) {
  p.for_each([&](const std::string& name, const Tensor& t) { b.bind(name, t); });
}

inline void bind_masks(ad::Bindings& b, const MaskSet& m) {
  for (std::size_t l = 0; l < m.layers(); ++l) {
    b.bind(mask_head_key(l), m.head[l]);
    b.bind(mask_inter_key(l), m.inter[l]);
  }
}

inline void bind_lora(ad::Bindings& b, const LoraSet& s) {
  s.for_each([&](const std::string& name, const Tensor& t) { b.bind(name, t); });
}

struct LmOutput {
  Tensor logits;                // seq x vocab
  std::vector<Tensor> hiddens;  // one seq x hidden per layer
};

inline void check_tokens(const ModelConfig& cfg, std::span<const int> tokens) {
  if (tokens.empty()) throw RangeError("empty token sequence");
  if (tokens.size() > cfg.seq_len) {
    throw RangeError("sequence of " + std::to_string(tokens.size()) +
                     " tokens exceeds seq_len " + std::to_string(cfg.seq_len));
  }
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab) {
      throw RangeError("token id " + std::to_string(t) + " outside vocabulary");
    }
  }
}

/// Forward-only evaluator that caches one graph per sequence length.
/// Null masks mean "no mask nodes"; null/empty LoRA means "no adapters".
class LmRunner {
 public:
  LmOutput run(const ModelParams& params, const MaskSet* masks, const LoraSet* lora,
               std::span<const int> tokens) {
    const ModelConfig& cfg = params.config;
    check_tokens(cfg, tokens);
    if (masks) masks->check(cfg);
    const bool use_lora = lora && !lora->empty();
    const LmGraph& lg = graph_for(cfg, tokens.size(), masks != nullptr, use_lora);
    ad::Bindings b;
    bind_params(b, params);
    if (masks) bind_masks(b, *masks);
    if (use_lora) bind_lora(b, *lora);
    b.own("tokens", token_column(tokens));
    ad::Evaluation ev = ad::forward(lg.graph, b);
    LmOutput out;
    out.logits = ev.value(lg.logits);
    for (ad::NodeId h : lg.hiddens) out.hiddens.push_back(ev.value(h));
    return out;
  }

 private:
  const LmGraph& graph_for(const ModelConfig& cfg, std::size_t len, bool masks, bool lora) {
    const auto key = std::make_tuple(len, masks, lora);
    auto it = cache_.find(key);
    if (it == cache_.end() || !(it->second->config == cfg)) {
      BuildOptions opt;
      opt.masks = masks;
      opt.lora = lora;
      opt.train_masks = false;
      opt.train_lora = false;
      cache_[key] = std::make_unique<LmGraph>(cfg, len, opt);
      it = cache_.find(key);
    }
    return *it->second;
  }

  std::map<std::tuple<std::size_t, bool, bool>, std::unique_ptr<LmGraph>> cache_;
};

inline LmOutput forward_lm(const ModelParams& params, const MaskSet* masks, const LoraSet* lora,
                           std::span<const int> tokens) {
  LmRunner runner;
  return runner.run(params, masks, lora, tokens);
}

namespace detail {

inline Tensor run_sublayer(const ModelParams& params, const MaskSet& masks, const LoraSet* lora,
                           std::size_t layer, const Tensor& x, bool attention) {
  const ModelConfig& cfg = params.config;
  if (layer >= cfg.layers) {
    throw RangeError("layer index " + std::to_string(layer) + " out of range");
  }
  if (x.cols() != cfg.hidden) throw ShapeError("input width must equal hidden size");
  masks.check(cfg);
  BuildOptions opt;
  opt.lora = lora && !lora->empty();
  opt.train_masks = false;
  opt.train_lora = false;
  ad::Graph g;
  DecoderBuilder b(g, cfg, opt);
  ad::NodeId in = g.input("x");
  ad::NodeId out = attention ? b.attention(layer, in) : b.ffn(layer, in);
  ad::Bindings bind;
  bind_params(bind, params);
  bind_masks(bind, masks);
  if (opt.lora) bind_lora(bind, *lora);
  bind.bind("x", x);
  return ad::forward(g, bind).value(out);
}

}  // namespace detail

/// Sum over heads of m_head[l][j] * (causal attention of head j, projected by
/// its rows of W_O). `x` is the sub-layer input (already normalized).
inline Tensor mha_masked(std::size_t layer, const Tensor& x, const MaskSet& masks,
                         const ModelParams& params, const LoraSet* lora = nullptr) {
  return detail::run_sublayer(params, masks, lora, layer, x, true);
}

/// (silu(X W_gate) .* (X W_up) .* m_inter[l]) W_down.
inline Tensor ffn_masked(std::size_t layer, const Tensor& x, const MaskSet& masks,
                         const ModelParams& params, const LoraSet* lora = nullptr) {
  return detail::run_sublayer(params, masks, lora, layer, x, false);
}

}  // namespace maskprune
