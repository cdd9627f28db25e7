#pragma once

// Distillation objective between the frozen dense teacher and the masked,
// LoRA-adapted student: KL(p_student || p_teacher) averaged over positions,
// plus alpha times the sum over layers of hidden-state MSE, plus an optional
// next-token cross-entropy term.

#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "maskprune/autodiff.hpp"
#include "maskprune/errors.hpp"
#include "maskprune/model.hpp"
#include "maskprune/tensor.hpp"

namespace maskprune {

struct DistillConfig {
  double alpha = 0.1;
  bool include_lm_loss = false;
  double lm_loss_weight = 1.0;

  void validate() const {
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
    if (!(lm_loss_weight >= 0.0)) throw ConfigError("lm_loss_weight must be >= 0");
  }
};

struct LossTerms {
  double kl = 0.0;
  double layer = 0.0;
  double lm = 0.0;
  double total = 0.0;
};

/// Mean over rows of sum_v p_s(v) * (log p_s(v) - log p_t(v)).
inline double kl_loss(const Tensor& student_logits, const Tensor& teacher_logits) {
  student_logits.require_same_shape(teacher_logits, "kl_loss");
  const Tensor ls = ad::detail::log_softmax_rows(student_logits);
  const Tensor lt = ad::detail::log_softmax_rows(teacher_logits);
  double acc = 0.0;
  for (std::size_t i = 0; i < ls.rows(); ++i)
    for (std::size_t j = 0; j < ls.cols(); ++j) acc += std::exp(ls(i, j)) * (ls(i, j) - lt(i, j));
  return acc / static_cast<double>(ls.rows());
}

/// Sum over layers of the mean squared error between hidden states.
inline double layer_loss(std::span<const Tensor> student, std::span<const Tensor> teacher) {
  if (student.size() != teacher.size()) {
    throw ShapeError("layer_loss: " + std::to_string(student.size()) + " student layers vs " +
                     std::to_string(teacher.size()) + " teacher layers");
  }
  double total = 0.0;
  for (std::size_t l = 0; l < student.size(); ++l) {
    student[l].require_same_shape(teacher[l], "layer_loss");
    double acc = 0.0;
    for (std::size_t i = 0; i < student[l].size(); ++i) {
      const double d = student[l][i] - teacher[l][i];
      acc += d * d;
    }
    total += acc / static_cast<double>(student[l].size());
  }
  return total;
}

/// Eager form of the objective. `targets` is only read when the LM term is on
/// and must then hold one next-token id per logit row.
inline LossTerms distill_loss(const LmOutput& student, const LmOutput& teacher,
                              const DistillConfig& cfg, std::span<const int> targets = {}) {
  cfg.validate();
  LossTerms t;
  t.kl = kl_loss(student.logits, teacher.logits);
  t.layer = layer_loss(student.hiddens, teacher.hiddens);
  t.total = t.kl + cfg.alpha * t.layer;
  if (cfg.include_lm_loss) {
    if (targets.size() != student.logits.rows()) {
      throw ShapeError("distill_loss: targets length does not match logits");
    }
    const Tensor ls = ad::detail::log_softmax_rows(student.logits);
    double nll = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      nll -= ls(i, ad::detail::token_id(targets[i], ls.cols(), "distill_loss"));
    }
    t.lm = nll / static_cast<double>(targets.size());
    t.total += cfg.lm_loss_weight * t.lm;
  }
  return t;
}

/// Student decoder plus teacher placeholders and the loss nodes.
struct DistillGraph {
  LmGraph lm;
  DistillConfig cfg;
  ad::NodeId teacher_logits = 0;
  std::vector<ad::NodeId> teacher_hiddens;
  ad::NodeId targets = 0;
  ad::NodeId kl = 0;
  ad::NodeId layer = 0;
  ad::NodeId lm_loss = 0;
  ad::NodeId loss = 0;

  DistillGraph(const ModelConfig& model, std::size_t len, BuildOptions opt, DistillConfig dc)
      : lm(model, len, opt), cfg(dc) {
    cfg.validate();
    ad::Graph& g = lm.graph;
    teacher_logits = g.input("teacher.logits");
    kl = g.kl_div(lm.logits, teacher_logits);
    std::vector<ad::NodeId> mses;
    for (std::size_t l = 0; l < lm.hiddens.size(); ++l) {
      teacher_hiddens.push_back(g.input("teacher.hidden." + std::to_string(l)));
      mses.push_back(g.mse(lm.hiddens[l], teacher_hiddens.back()));
    }
    layer = mses.front();
    for (std::size_t l = 1; l < mses.size(); ++l) layer = g.add(layer, mses[l]);
    loss = g.add(kl, g.scale(layer, cfg.alpha));
    if (cfg.include_lm_loss) {
      targets = g.input("targets");
      lm_loss = g.cross_entropy(lm.logits, targets);
      loss = g.add(loss, g.scale(lm_loss, cfg.lm_loss_weight));
    }
  }
};

struct LossAndGrads {
  LossTerms terms;
  std::map<std::string, Tensor> grads;  // keyed by leaf name
};

/// Forward + backward of the distillation loss for one sequence.
class DistillEvaluator {
 public:
  DistillEvaluator(DistillConfig cfg, BuildOptions opt) : cfg_(cfg), opt_(opt) { cfg_.validate(); }

  /// `tokens` is the student/teacher input; `targets` (next tokens) is only
  /// used when the LM term is enabled.
  LossAndGrads evaluate(const ModelParams& params, const MaskSet* masks, const LoraSet* lora,
                        const LmOutput& teacher, std::span<const int> tokens,
                        std::span<const int> targets = {}) {
    const ModelConfig& mc = params.config;
    check_tokens(mc, tokens);
    const DistillGraph& dg = graph_for(mc, tokens.size());
    ad::Bindings b;
    bind_params(b, params);
    if (opt_.masks) {
      if (!masks) throw GraphError("graph expects masks");
      masks->check(mc);
      bind_masks(b, *masks);
    }
    if (opt_.lora) {
      if (!lora || lora->empty()) throw GraphError("graph expects LoRA adapters");
      bind_lora(b, *lora);
    }
    b.own("tokens", token_column(tokens));
    b.bind("teacher.logits", teacher.logits);
    if (teacher.hiddens.size() != mc.layers) throw ShapeError("teacher hidden count mismatch");
    for (std::size_t l = 0; l < mc.layers; ++l) {
      b.bind("teacher.hidden." + std::to_string(l), teacher.hiddens[l]);
    }
    if (cfg_.include_lm_loss) {
      if (targets.size() != tokens.size()) throw ShapeError("targets length mismatch");
      check_tokens(mc, targets);
      b.own("targets", token_column(targets));
    }
    ad::Evaluation ev = ad::forward(dg.lm.graph, b);
    LossAndGrads out;
    out.terms.kl = ev.value(dg.kl).item();
    out.terms.layer = ev.value(dg.layer).item();
    if (cfg_.include_lm_loss) out.terms.lm = ev.value(dg.lm_loss).item();
    out.terms.total = ev.value(dg.loss).item();
    for (auto& [id, grad] : ad::backward(dg.lm.graph, ev, dg.loss)) {
      out.grads.emplace(dg.lm.graph.node(id).name, std::move(grad));
    }
    return out;
  }

  const DistillConfig& config() const { return cfg_; }

 private:
  const DistillGraph& graph_for(const ModelConfig& mc, std::size_t len) {
    auto it = cache_.find(len);
    if (it == cache_.end() || !(it->second->lm.config == mc)) {
      cache_[len] = std::make_unique<DistillGraph>(mc, len, opt_, cfg_);
      it = cache_.find(len);
    }
    return *it->second;
  }

  DistillConfig cfg_;
  BuildOptions opt_;
  std::map<std::size_t, std::unique_ptr<DistillGraph>> cache_;
};

}  // namespace maskprune
