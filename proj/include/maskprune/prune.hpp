#pragma once

// Turning trained masks into a smaller dense model: pick the units to drop,
// fold LoRA and residual mask values into the weights, then slice.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "maskprune/errors.hpp"
#include "maskprune/model.hpp"
#include "maskprune/sparsity.hpp"

namespace maskprune {

/// Units to remove, per layer. Every layer removes the same number of heads
/// and the same number of FFN channels.
struct PrunePlan {
  std::vector<std::vector<std::size_t>> heads;     // sorted ascending
  std::vector<std::vector<std::size_t>> channels;  // sorted ascending

  std::size_t layers() const { return heads.size(); }
  std::size_t heads_removed() const { return heads.empty() ? 0 : heads.front().size(); }
  std::size_t channels_removed() const { return channels.empty() ? 0 : channels.front().size(); }

  bool uniform() const {
    for (std::size_t l = 0; l < layers(); ++l) {
      if (heads[l].size() != heads_removed() || channels[l].size() != channels_removed()) {
        return false;
      }
    }
    return true;
  }

  bool empty() const { return heads_removed() == 0 && channels_removed() == 0; }

  void check(const ModelConfig& cfg) const {
    if (heads.size() != cfg.layers || channels.size() != cfg.layers) {
      throw ShapeError("prune plan layer count does not match model");
    }
    if (!uniform()) throw RangeError("prune plan removes different counts across layers");
    auto check_set = [](const std::vector<std::size_t>& idx, std::size_t dim, const char* what) {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= dim) throw RangeError(std::string(what) + " index out of range");
        if (i && idx[i] <= idx[i - 1]) throw RangeError(std::string(what) + " indices not distinct");
      }
    };
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      check_set(heads[l], cfg.heads, "head");
      check_set(channels[l], cfg.ffn, "channel");
    }
    if (heads_removed() >= cfg.heads || channels_removed() >= cfg.ffn) {
      throw RangeError("prune plan would leave a layer without heads or FFN channels");
    }
  }
};

/// Per layer, the ceil(s_head) heads and ceil(s_inter) channels with the
/// smallest mask values (ties to the lowest index).
inline PrunePlan select_pruned(const MaskSet& masks, const SparsityState& s) {
  const std::size_t kh = ceil_count(s.s_head);
  const std::size_t ki = ceil_count(s.s_inter);
  PrunePlan plan;
  for (std::size_t l = 0; l < masks.layers(); ++l) {
    if (kh > masks.head[l].size() || ki > masks.inter[l].size()) {
      throw RangeError("select_pruned: ceil(s) exceeds the mask dimension");
    }
    plan.heads.push_back(smallest_k_sqnorm(masks.head[l].data(), kh).indices);
    plan.channels.push_back(smallest_k_sqnorm(masks.inter[l].data(), ki).indices);
  }
  return plan;
}

/// Copy of `masks` with every planned unit set to exactly 0.
inline MaskSet hard_zero(const MaskSet& masks, const PrunePlan& plan) {
  MaskSet out = masks;
  for (std::size_t l = 0; l < plan.layers(); ++l) {
    for (std::size_t j : plan.heads[l]) out.head[l][j] = 0.0;
    for (std::size_t c : plan.channels[l]) out.inter[l][c] = 0.0;
  }
  return out;
}

/// Units that are numerically zero but not in the plan (the optimizer zeroed
/// more than ceil(s) of them).
inline std::size_t stray_zero_units(const MaskSet& masks, const PrunePlan& plan) {
  std::size_t n = 0;
  for (std::size_t l = 0; l < plan.layers(); ++l) {
    for (std::size_t j = 0; j < masks.head[l].size(); ++j) {
      const bool planned = std::binary_search(plan.heads[l].begin(), plan.heads[l].end(), j);
      n += !planned && std::abs(masks.head[l][j]) <= kZeroThreshold;
    }
    for (std::size_t c = 0; c < masks.inter[l].size(); ++c) {
      const bool planned =
          std::binary_search(plan.channels[l].begin(), plan.channels[l].end(), c);
      n += !planned && std::abs(masks.inter[l][c]) <= kZeroThreshold;
    }
  }
  return n;
}

/// W <- W + B*A for every adapted projection.
inline ModelParams merge_lora(const ModelParams& params, const LoraSet& lora) {
  ModelParams out = params;
  if (lora.empty()) return out;
  if (lora.layers.size() != params.layers.size()) throw ShapeError("lora layer count mismatch");
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    for (Proj p : kAllProj) out.layers[l].weight(p) = apply_lora(params.layers[l].weight(p), lora.at(l, p));
  }
  return out;
}

/// Folds masks into the weights so the returned model, run with all masks at
/// 1, reproduces the masked model. LoRA is merged first.
///
/// Head j scales its W_V column block (attention output is linear in V).
/// Channel c scales its W_up column only: the gate passes through SiLU, so
/// scaling W_gate as well would apply the mask twice. A channel whose mask is
/// exactly 0 also gets its W_gate column zeroed.
inline ModelParams fuse_masks(const ModelParams& params, const MaskSet& masks,
                              const LoraSet* lora = nullptr) {
  masks.check(params.config);
  ModelParams out = lora ? merge_lora(params, *lora) : params;
  const ModelConfig& cfg = out.config;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    LayerParams& lp = out.layers[l];
    for (std::size_t j = 0; j < cfg.heads; ++j) {
      const double m = masks.head[l][j];
      if (m == 1.0) continue;
      for (std::size_t r = 0; r < lp.wv.rows(); ++r)
        for (std::size_t c = j * cfg.head_dim; c < (j + 1) * cfg.head_dim; ++c) lp.wv(r, c) *= m;
    }
    for (std::size_t c = 0; c < cfg.ffn; ++c) {
      const double m = masks.inter[l][c];
      if (m == 1.0) continue;
      for (std::size_t r = 0; r < lp.w_up.rows(); ++r) {
        lp.w_up(r, c) *= m;
        if (m == 0.0) lp.w_gate(r, c) = 0.0;
      }
    }
  }
  return out;
}

namespace detail {

inline std::vector<std::size_t> complement(const std::vector<std::size_t>& removed, std::size_t n) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::binary_search(removed.begin(), removed.end(), i)) keep.push_back(i);
  }
  return keep;
}

inline Tensor take_cols(const Tensor& w, const std::vector<std::size_t>& cols) {
  Tensor out({w.rows(), cols.size()});
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t k = 0; k < cols.size(); ++k) out(r, k) = w(r, cols[k]);
  return out;
}

inline Tensor take_rows(const Tensor& w, const std::vector<std::size_t>& rows) {
  Tensor out({rows.size(), w.cols()});
  for (std::size_t k = 0; k < rows.size(); ++k) {
    auto src = w.row_span(rows[k]);
    std::copy(src.begin(), src.end(), out.row_span(k).begin());
  }
  return out;
}

}  // namespace detail

/// Slices a fused model down to the retained heads and channels.
inline ModelParams materialize(const ModelParams& fused, const PrunePlan& plan) {
  const ModelConfig& cfg = fused.config;
  plan.check(cfg);
  ModelParams out;
  out.config = cfg;
  out.config.heads = cfg.heads - plan.heads_removed();
  out.config.ffn = cfg.ffn - plan.channels_removed();
  out.embed = fused.embed;
  out.final_norm = fused.final_norm;
  out.lm_head = fused.lm_head;
  out.layers.resize(cfg.layers);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const LayerParams& src = fused.layers[l];
    LayerParams& dst = out.layers[l];
    std::vector<std::size_t> head_cols;
    for (std::size_t j : detail::complement(plan.heads[l], cfg.heads)) {
      for (std::size_t c = 0; c < cfg.head_dim; ++c) head_cols.push_back(j * cfg.head_dim + c);
    }
    const std::vector<std::size_t> chans = detail::complement(plan.channels[l], cfg.ffn);
    dst.attn_norm = src.attn_norm;
    dst.ffn_norm = src.ffn_norm;
    dst.wq = detail::take_cols(src.wq, head_cols);
    dst.wk = detail::take_cols(src.wk, head_cols);
    dst.wv = detail::take_cols(src.wv, head_cols);
    dst.wo = detail::take_rows(src.wo, head_cols);
    dst.w_gate = detail::take_cols(src.w_gate, chans);
    dst.w_up = detail::take_cols(src.w_up, chans);
    dst.w_down = detail::take_rows(src.w_down, chans);
  }
  out.config.validate();
  return out;
}

/// Cross-layer variance of retained head count and FFN width of a
/// materialized model. Both are 0 for any model built from a uniform plan.
inline std::pair<double, double> structure_variance(const ModelParams& p) {
  std::vector<double> heads, widths;
  for (const LayerParams& lp : p.layers) {
    heads.push_back(static_cast<double>(lp.wq.cols() / p.config.head_dim));
    widths.push_back(static_cast<double>(lp.w_up.cols()));
  }
  auto var = [](const std::vector<double>& xs) {
    double mean = 0.0, v = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    for (double x : xs) v += (x - mean) * (x - mean);
    return v / static_cast<double>(xs.size());
  };
  return {var(heads), var(widths)};
}

/// Largest absolute logit difference between the masked model (with planned
/// units hard-zeroed) and the small model over the given token sequences.
inline double verify_equivalence(const ModelParams& params, const MaskSet& masks,
                                 const LoraSet* lora, const PrunePlan& plan,
                                 const ModelParams& small,
                                 const std::vector<std::vector<int>>& sequences) {
  const ModelConfig& a = params.config;
  const ModelConfig& b = small.config;
  if (a.layers != b.layers || a.hidden != b.hidden || a.vocab != b.vocab ||
      a.head_dim != b.head_dim || b.heads != a.heads - plan.heads_removed() ||
      b.ffn != a.ffn - plan.channels_removed()) {
    throw ShapeError("verify_equivalence: small model does not match the plan");
  }
  const MaskSet zeroed = hard_zero(masks, plan);
  LmRunner masked_runner, small_runner;
  double worst = 0.0;
  for (const auto& seq : sequences) {
    const Tensor lm = masked_runner.run(params, &zeroed, lora, seq).logits;
    const Tensor ls = small_runner.run(small, nullptr, nullptr, seq).logits;
    worst = std::max(worst, max_abs_diff(lm, ls));
  }
  return worst;
}

/// One-shot magnitude baseline: in every layer drop the `k_heads` heads and
/// `k_channels` channels whose weight groups have the smallest squared
/// Frobenius norm.
inline PrunePlan magnitude_plan(const ModelParams& params, std::size_t k_heads,
                                std::size_t k_channels) {
  const ModelConfig& cfg = params.config;
  if (k_heads >= cfg.heads || k_channels >= cfg.ffn) {
    throw RangeError("magnitude_plan: would leave a layer empty");
  }
  PrunePlan plan;
  for (const LayerParams& lp : params.layers) {
    std::vector<double> head_score(cfg.heads, 0.0), chan_score(cfg.ffn, 0.0);
    for (std::size_t j = 0; j < cfg.heads; ++j) {
      for (std::size_t c = j * cfg.head_dim; c < (j + 1) * cfg.head_dim; ++c) {
        for (std::size_t r = 0; r < cfg.hidden; ++r) {
          head_score[j] += lp.wq(r, c) * lp.wq(r, c) + lp.wk(r, c) * lp.wk(r, c) +
                           lp.wv(r, c) * lp.wv(r, c) + lp.wo(c, r) * lp.wo(c, r);
        }
      }
    }
    for (std::size_t c = 0; c < cfg.ffn; ++c) {
      for (std::size_t r = 0; r < cfg.hidden; ++r) {
        chan_score[c] += lp.w_gate(r, c) * lp.w_gate(r, c) + lp.w_up(r, c) * lp.w_up(r, c) +
                         lp.w_down(c, r) * lp.w_down(c, r);
      }
    }
    plan.heads.push_back(smallest_k_sqnorm(head_score, k_heads).indices);
    plan.channels.push_back(smallest_k_sqnorm(chan_score, k_channels).indices);
  }
  return plan;
}

}  // namespace maskprune
