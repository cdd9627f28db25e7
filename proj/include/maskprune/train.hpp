#pragma once

// Dense pretraining of the teacher and perplexity evaluation.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "maskprune/autodiff.hpp"
#include "maskprune/corpus.hpp"
#include "maskprune/minimax.hpp"
#include "maskprune/model.hpp"

namespace maskprune {

/// Mean next-token negative log-likelihood of one logit matrix.
inline double mean_nll(const Tensor& logits, std::span<const int> targets) {
  if (targets.size() != logits.rows()) throw ShapeError("mean_nll: targets length mismatch");
  const Tensor ls = ad::detail::log_softmax_rows(logits);
  double nll = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    nll -= ls(i, ad::detail::token_id(targets[i], ls.cols(), "mean_nll"));
  }
  return nll / static_cast<double>(targets.size());
}

/// exp(mean next-token NLL) over every target of every window.
inline double eval_ppl(const ModelParams& params, const MaskSet* masks, const LoraSet* lora,
                       const std::vector<Sequence>& windows) {
  if (windows.empty()) throw RangeError("eval_ppl: no evaluation windows");
  LmRunner runner;
  double total = 0.0;
  std::size_t count = 0;
  for (const Sequence& w : windows) {
    const Tensor logits = runner.run(params, masks, lora, w.inputs).logits;
    total += mean_nll(logits, w.targets) * static_cast<double>(w.targets.size());
    count += w.targets.size();
  }
  return std::exp(total / static_cast<double>(count));
}

struct PretrainConfig {
  std::size_t steps = 300;
  std::size_t batch_size = 16;
  double lr = 3e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 1;
  std::size_t eval_windows = 32;
  double target_ratio = 0.8;  // required final / untrained eval perplexity
  std::size_t min_tokens = 50000;

  void validate() const {
    if (steps == 0 || batch_size == 0) throw ConfigError("pretrain steps and batch_size must be >= 1");
    if (!(lr > 0.0) || !(weight_decay >= 0.0)) throw ConfigError("bad pretrain learning rate");
    if (!(target_ratio > 0.0)) throw ConfigError("target_ratio must be > 0");
  }
};

struct PretrainResult {
  ModelParams params;
  double initial_ppl = 0.0;
  double final_ppl = 0.0;
  std::vector<double> losses;
  bool reached_target = false;
};

/// Next-token cross-entropy training of every dense weight.
inline PretrainResult pretrain(const ModelConfig& cfg, const PretrainConfig& pc,
                               const Corpus& corpus,
                               const std::function<void(std::size_t, double)>& on_step = {}) {
  cfg.validate_dense();
  pc.validate();
  if (corpus.tokens.size() < pc.min_tokens) {
    throw RangeError("pretraining corpus has " + std::to_string(corpus.tokens.size()) +
                     " tokens, need at least " + std::to_string(pc.min_tokens));
  }
  PretrainResult res;
  res.params = ModelParams::init(cfg, pc.seed);
  const std::vector<Sequence> eval_set = chunk_windows(corpus.eval(), cfg.seq_len, pc.eval_windows);
  res.initial_ppl = eval_ppl(res.params, nullptr, nullptr, eval_set);

  BuildOptions opt;
  opt.masks = false;
  opt.lora = false;
  opt.train_weights = true;
  LmGraph lg(cfg, cfg.seq_len, opt);
  const ad::NodeId targets = lg.graph.input("targets");
  const ad::NodeId loss = lg.graph.cross_entropy(lg.logits, targets);

  BatchSampler sampler(corpus.train(), cfg.seq_len, pc.batch_size, pc.seed * 7919 + 1);
  AdamW opt_w(pc.lr, 0.9, 0.999, 1e-8, pc.weight_decay);
  const double inv = 1.0 / static_cast<double>(pc.batch_size);
  for (std::size_t step = 1; step <= pc.steps; ++step) {
    std::map<std::string, Tensor> grads;
    double batch_loss = 0.0;
    for (const Sequence& s : sampler.next()) {
      ad::Bindings b;
      bind_params(b, res.params);
      b.own("tokens", token_column(s.inputs));
      b.own("targets", token_column(s.targets));
      ad::Evaluation ev = ad::forward(lg.graph, b);
      batch_loss += inv * ev.value(loss).item();
      for (auto& [id, g] : ad::backward(lg.graph, ev, loss)) {
        g *= inv;
        auto [it, fresh] = grads.try_emplace(lg.graph.node(id).name, std::move(g));
        if (!fresh) it->second += g;
      }
    }
    if (!std::isfinite(batch_loss)) {
      throw NumericalError("pretraining diverged at step " + std::to_string(step));
    }
    res.params.for_each([&](const std::string& name, Tensor& w) {
      opt_w.update(name, w, grads.at(name), step);
    });
    res.losses.push_back(batch_loss);
    if (on_step) on_step(step, batch_loss);
  }
  res.final_ppl = eval_ppl(res.params, nullptr, nullptr, eval_set);
  res.reached_target = res.final_ppl < pc.target_ratio * res.initial_ppl;
  return res;
}

}  // namespace maskprune
