#pragma once

// Interleaved primal-dual driver for mask training:
//   masks    <- prox(clamp(AdamW step on the distillation loss))
//   s        <- s - eta2 * (y * sum_l proxy_grad + resource_grad)
//   y        <- y + eta3 * sum_l ||m||^2_{ceil(s),2}
//   z        <- max(0, z + eta4 * (M(s) - M_prune))
//   LoRA     <- AdamW step on the same batch loss
// The FFN masks only receive the proximal shrink every T iterations, where T
// falls linearly from interval_start to interval_end over the run.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "maskprune/autodiff.hpp"
#include "maskprune/errors.hpp"
#include "maskprune/model.hpp"
#include "maskprune/objective.hpp"
#include "maskprune/sparsity.hpp"

namespace maskprune {

struct RunConfig {
  double eta1 = 0.5;     // proximal decay rate
  double eta2 = 2e-4;    // s step size
  double eta3 = 0.01;    // y ascent rate
  double eta4 = 1.5e-5;  // z ascent rate
  double mask_lr = 1e-2;
  double lora_lr = 1e-3;
  double weight_decay = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 8;
  std::size_t iterations = 2000;  // tau
  std::size_t interval_start = 10;
  std::size_t interval_end = 1;
  double target_sparsity = 0.5;
  double alpha = 0.1;
  bool include_lm_loss = false;
  double lm_loss_weight = 1.0;
  std::size_t lora_rank = 4;  // 0 disables adapters
  double lora_init_std = 0.1;
  bool shared_multiplier = true;
  double retained_threshold = 1e-3;  // width statistics in the trace
  std::uint64_t seed = 1;

  void validate() const {
    for (double r : {eta1, eta2, eta3, eta4, mask_lr, lora_lr, weight_decay}) {
      if (!(r >= 0.0)) throw ConfigError("learning rates and decay rates must be >= 0");
    }
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
      throw ConfigError("adam betas must lie in [0, 1)");
    }
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (iterations == 0) throw ConfigError("iterations must be >= 1");
    if (interval_end < 1 || interval_start < interval_end) {
      throw ConfigError("need interval_start >= interval_end >= 1");
    }
    if (!(target_sparsity >= 0.0 && target_sparsity < 1.0)) {
      throw ConfigError("target_sparsity must lie in [0, 1)");
    }
    if (!(alpha >= 0.0) || !(lm_loss_weight >= 0.0)) {
      throw ConfigError("alpha and lm_loss_weight must be >= 0");
    }
    if (!(retained_threshold >= 0.0)) throw ConfigError("retained_threshold must be >= 0");
  }

  DistillConfig distill() const { return {alpha, include_lm_loss, lm_loss_weight}; }
};

/// Proximal cadence for the FFN masks at iteration t (0 <= t <= tau):
/// round-half-up of the linear interpolation, never below 1.
inline std::size_t interval_schedule(std::size_t t, std::size_t tau, std::size_t start,
                                     std::size_t end) {
  if (tau == 0) return std::max<std::size_t>(1, start);
  const double frac = static_cast<double>(std::min(t, tau)) / static_cast<double>(tau);
  const double v = static_cast<double>(start) +
                   (static_cast<double>(end) - static_cast<double>(start)) * frac;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(v + 0.5)));
}

inline std::size_t interval_schedule(std::size_t t, const RunConfig& cfg) {
  return interval_schedule(t, cfg.iterations, cfg.interval_start, cfg.interval_end);
}

/// Decoupled-weight-decay Adam with per-tensor moment buffers.
class AdamW {
 public:
  AdamW() = default;
  AdamW(double lr, double beta1, double beta2, double eps, double weight_decay)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

  void update(const std::string& key, Tensor& param, const Tensor& grad, std::size_t step) {
    param.require_same_shape(grad, "adamw");
    auto [it, fresh] = moments_.try_emplace(key);
    if (fresh) {
      it->second.first = Tensor(param.shape());
      it->second.second = Tensor(param.shape());
    }
    Tensor& m = it->second.first;
    Tensor& v = it->second.second;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(step));
    for (std::size_t i = 0; i < param.size(); ++i) {
      m[i] = b1_ * m[i] + (1.0 - b1_) * grad[i];
      v[i] = b2_ * v[i] + (1.0 - b2_) * grad[i] * grad[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      param[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * param[i]);
    }
  }

  double lr() const { return lr_; }

 private:
  double lr_ = 1e-3, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8, wd_ = 0.0;
  std::map<std::string, std::pair<Tensor, Tensor>> moments_;
};

/// One training example: `inputs` feed the model, `targets` are the next tokens.
struct Sequence {
  std::vector<int> inputs;
  std::vector<int> targets;
};
using Batch = std::vector<Sequence>;

struct TrainState {
  std::size_t t = 0;  // iterations completed
  MaskSet masks;
  SparsityState sparsity;
  double y_inter = 0.0;  // used only when multipliers are not shared
  LoraSet lora;
  AdamW mask_opt;
  AdamW lora_opt;
  double last_grad_s_head = 0.0;
  double last_grad_s_inter = 0.0;
  std::size_t last_interval = 0;

  double multiplier(Group g, bool shared) const {
    return (shared || g == Group::Head) ? sparsity.y : y_inter;
  }
};

struct TraceRow {
  std::size_t iteration = 0;
  LossTerms loss;
  double s_head = 0.0;
  double s_inter = 0.0;
  double y = 0.0;
  double y_inter = 0.0;
  double z = 0.0;
  double resource = 0.0;
  double grad_s_head = 0.0;
  double grad_s_inter = 0.0;
  std::size_t interval = 0;
  bool inter_prox = false;
  std::vector<double> head_mass;   // per-layer smallest-ceil(s_head) mass
  std::vector<double> inter_mass;  // per-layer smallest-ceil(s_inter) mass
  double head_count_var = 0.0;     // cross-layer variance of retained heads
  double inter_width_var = 0.0;    // cross-layer variance of retained channels
};

struct RunResult {
  TrainState state;
  std::vector<TraceRow> trace;
  ResourceModel resource;
  bool constraint_met = false;
  double seconds = 0.0;
};

inline double population_variance(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return var / static_cast<double>(xs.size());
}

/// Cross-layer variance of the number of entries above `threshold`.
inline double retained_variance(const std::vector<Tensor>& rows, double threshold) {
  std::vector<double> counts;
  for (const Tensor& r : rows) {
    counts.push_back(static_cast<double>(
        std::count_if(r.data().begin(), r.data().end(), [&](double v) { return v > threshold; })));
  }
  return population_variance(counts);
}

/// Holds the frozen dense model (which is both teacher and student base), the
/// resource model and evaluator caches. The state it advances is external.
class MinimaxTrainer {
 public:
  MinimaxTrainer(const ModelParams& dense, RunConfig cfg)
      : params_(dense),
        cfg_(std::move(cfg)),
        resource_(ResourceModel::for_sparsity(dense.config, static_cast<double>(dense.count()),
                                              cfg_.target_sparsity)),
        student_(cfg_.distill(), student_options(cfg_)) {
    cfg_.validate();
    params_.config.validate_dense();
  }

  const RunConfig& config() const { return cfg_; }
  const ResourceModel& resource_model() const { return resource_; }

  /// Algorithm start: m = 1, s = 0, y = z = 0, LoRA B = 0.
  TrainState initial_state() const {
    TrainState st;
    st.masks = MaskSet::ones(params_.config);
    if (cfg_.lora_rank > 0) {
      st.lora = LoraSet::init(params_, cfg_.lora_rank, cfg_.lora_init_std, cfg_.seed ^ 0x10a4u);
    }
    st.mask_opt = AdamW(cfg_.mask_lr, cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps,
                        cfg_.weight_decay);
    st.lora_opt = AdamW(cfg_.lora_lr, cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps,
                        cfg_.weight_decay);
    return st;
  }

  /// Mean batch loss and gradients (w.r.t. masks and LoRA) at the current state.
  LossAndGrads batch_gradients(const TrainState& st, const Batch& batch) {
    if (batch.empty()) throw RangeError("empty batch");
    LossAndGrads total;
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (const Sequence& seq : batch) {
      const LmOutput teacher = teacher_.run(params_, nullptr, nullptr, seq.inputs);
      LossAndGrads one = student_.evaluate(params_, &st.masks,
                                           st.lora.empty() ? nullptr : &st.lora, teacher,
                                           seq.inputs, seq.targets);
      total.terms.kl += inv * one.terms.kl;
      total.terms.layer += inv * one.terms.layer;
      total.terms.lm += inv * one.terms.lm;
      total.terms.total += inv * one.terms.total;
      for (auto& [name, g] : one.grads) {
        g *= inv;
        auto it = total.grads.find(name);
        if (it == total.grads.end()) {
          total.grads.emplace(name, std::move(g));
        } else {
          it->second += g;
        }
      }
    }
    return total;
  }

  /// One full iteration; returns its trace row.
  TraceRow step(TrainState& st, const Batch& batch) {
    const ModelConfig& mc = params_.config;
    const std::size_t t = st.t + 1;
    LossAndGrads lg = batch_gradients(st, batch);
    if (!std::isfinite(lg.terms.total)) {
      std::ostringstream os;
      os << "non-finite loss at iteration " << t << " (kl=" << lg.terms.kl
         << ", layer=" << lg.terms.layer << ", s_head=" << st.sparsity.s_head
         << ", s_inter=" << st.sparsity.s_inter << ", y=" << st.sparsity.y
         << ", z=" << st.sparsity.z << ")";
      throw NumericalError(os.str());
    }
    const SparsityState before = st.sparsity;
    const double y_head = st.multiplier(Group::Head, cfg_.shared_multiplier);
    const double y_inter = st.multiplier(Group::Inter, cfg_.shared_multiplier);

    // (1) masks: gradient step, clamp, proximal shrink.
    for (std::size_t l = 0; l < mc.layers; ++l) {
      st.mask_opt.update(mask_head_key(l), st.masks.head[l], lg.grads.at(mask_head_key(l)), t);
      st.mask_opt.update(mask_inter_key(l), st.masks.inter[l], lg.grads.at(mask_inter_key(l)), t);
    }
    st.masks.clamp();
    const std::size_t interval = interval_schedule(t, cfg_);
    const bool inter_prox = t % interval == 0;
    for (std::size_t l = 0; l < mc.layers; ++l) {
      st.masks.head[l].assign(prox(st.masks.head[l].data(), before.s_head, cfg_.eta1, y_head));
      if (inter_prox) {
        st.masks.inter[l].assign(prox(st.masks.inter[l].data(), before.s_inter, cfg_.eta1, y_inter));
      }
    }

    // (2) sparsity counts: straight-through proxy + resource gradient.
    double proxy_head = 0.0, proxy_inter = 0.0;
    for (std::size_t l = 0; l < mc.layers; ++l) {
      proxy_head += grad_s_sparsity(st.masks.head[l].data(), before.s_head);
      proxy_inter += grad_s_sparsity(st.masks.inter[l].data(), before.s_inter);
    }
    st.last_grad_s_head = y_head * proxy_head + grad_s_resource(resource_, before.z, Group::Head);
    st.last_grad_s_inter =
        y_inter * proxy_inter + grad_s_resource(resource_, before.z, Group::Inter);
    st.sparsity.s_head = std::clamp(before.s_head - cfg_.eta2 * st.last_grad_s_head, 0.0,
                                    static_cast<double>(mc.heads - 1));
    st.sparsity.s_inter = std::clamp(before.s_inter - cfg_.eta2 * st.last_grad_s_inter, 0.0,
                                     static_cast<double>(mc.ffn - 1));

    // (3) sparsity multiplier ascent.
    const std::size_t kh = ceil_count(st.sparsity.s_head);
    const std::size_t ki = ceil_count(st.sparsity.s_inter);
    TraceRow row;
    double mass_head = 0.0, mass_inter = 0.0;
    for (std::size_t l = 0; l < mc.layers; ++l) {
      row.head_mass.push_back(smallest_k_sqnorm(st.masks.head[l].data(), kh).value);
      row.inter_mass.push_back(smallest_k_sqnorm(st.masks.inter[l].data(), ki).value);
      mass_head += row.head_mass.back();
      mass_inter += row.inter_mass.back();
    }
    if (cfg_.shared_multiplier) {
      st.sparsity.y = before.y + cfg_.eta3 * (mass_head + mass_inter);
      st.y_inter = st.sparsity.y;
    } else {
      st.sparsity.y = before.y + cfg_.eta3 * mass_head;
      st.y_inter = y_inter + cfg_.eta3 * mass_inter;
    }

    // (4) resource multiplier ascent, floored at zero.
    const double m_s = resource(resource_, st.sparsity);
    st.sparsity.z = std::max(0.0, before.z + cfg_.eta4 * (m_s - resource_.target));

    // (5) LoRA step on the same batch loss.
    if (!st.lora.empty()) {
      st.lora.for_each([&](const std::string& name, Tensor& w) {
        st.lora_opt.update(name, w, lg.grads.at(name), t);
      });
    }

    st.t = t;
    st.last_interval = interval;
    row.iteration = t;
    row.loss = lg.terms;
    row.s_head = st.sparsity.s_head;
    row.s_inter = st.sparsity.s_inter;
    row.y = st.sparsity.y;
    row.y_inter = st.y_inter;
    row.z = st.sparsity.z;
    row.resource = m_s;
    row.grad_s_head = st.last_grad_s_head;
    row.grad_s_inter = st.last_grad_s_inter;
    row.interval = interval;
    row.inter_prox = inter_prox;
    row.head_count_var = retained_variance(st.masks.head, cfg_.retained_threshold);
    row.inter_width_var = retained_variance(st.masks.inter, cfg_.retained_threshold);
    return row;
  }

  /// Runs `iterations` steps drawing batches from `next_batch`.
  RunResult run(const std::function<Batch()>& next_batch,
                const std::function<void(const TraceRow&)>& on_row = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    RunResult res;
    res.state = initial_state();
    res.resource = resource_;
    res.trace.reserve(cfg_.iterations);
    while (res.state.t < cfg_.iterations) {
      res.trace.push_back(step(res.state, next_batch()));
      if (on_row) on_row(res.trace.back());
    }
    res.constraint_met = resource(resource_, res.state.sparsity) <=
                         resource_.target + resource_.channel_cost;
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
  }

 private:
  static BuildOptions student_options(const RunConfig& cfg) {
    BuildOptions opt;
    opt.masks = true;
    opt.lora = cfg.lora_rank > 0;
    opt.train_weights = false;
    opt.train_masks = true;
    opt.train_lora = opt.lora;
    return opt;
  }

  ModelParams params_;
  RunConfig cfg_;
  ResourceModel resource_;
  DistillEvaluator student_;
  LmRunner teacher_;
};

}  // namespace maskprune
