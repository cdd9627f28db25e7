#pragma once

// Constraint mathematics for mask-based structured pruning.
//
// Notation used throughout: for a mask vector m and a count k,
// ||m||_{k,2}^2 is the sum of squares of the k entries of smallest magnitude.
// A continuous prune count s acts through ceil(s) wherever an integer is needed;
// its derivative through the ceiling is taken as 1 (straight-through).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "maskprune/errors.hpp"
#include "maskprune/model.hpp"

namespace maskprune {

/// Mask entries at or below this magnitude count as pruned.
inline constexpr double kZeroThreshold = 1e-9;

enum class Group { Head, Inter };

struct SparsityState {
  double s_head = 0.0;
  double s_inter = 0.0;
  double y = 0.0;
  double z = 0.0;
};

/// Parameter-count model of the pruned network.
struct ResourceModel {
  double total = 0.0;   // M
  double target = 0.0;  // M_prune
  double head_cost = 0.0;     // 4 * hidden * head_dim
  double channel_cost = 0.0;  // 3 * hidden
  std::size_t layers = 0;

  static ResourceModel from(const ModelConfig& cfg, double total_params, double target_params) {
    if (!(total_params > 0.0)) throw RangeError("resource model: M must be positive");
    if (!(target_params > 0.0 && target_params <= total_params)) {
      throw RangeError("resource model: need 0 < M_prune <= M");
    }
    ResourceModel rm;
    rm.total = total_params;
    rm.target = target_params;
    rm.head_cost = 4.0 * static_cast<double>(cfg.hidden * cfg.head_dim);
    rm.channel_cost = 3.0 * static_cast<double>(cfg.hidden);
    rm.layers = cfg.layers;
    return rm;
  }

  /// M_prune = (1 - target_sparsity) * M.
  static ResourceModel for_sparsity(const ModelConfig& cfg, double total_params,
                                    double target_sparsity) {
    if (!(target_sparsity >= 0.0 && target_sparsity < 1.0)) {
      throw RangeError("target sparsity must lie in [0, 1)");
    }
    return from(cfg, total_params, (1.0 - target_sparsity) * total_params);
  }

  double unit_cost(Group g) const { return g == Group::Head ? head_cost : channel_cost; }
};

/// ceil(s) as a count. Negative s is rejected.
inline std::size_t ceil_count(double s) {
  if (!(s >= 0.0)) throw RangeError("sparsity count must be non-negative, got " + std::to_string(s));
  return static_cast<std::size_t>(std::ceil(s));
}

/// Positions of `m` sorted by ascending magnitude, ties broken by lowest index.
inline std::vector<std::size_t> ascending_order(std::span<const double> m) {
  std::vector<std::size_t> idx(m.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(m[a]) < std::abs(m[b]); });
  return idx;
}

struct SmallestK {
  double value = 0.0;                // sum of squares of the selected entries
  std::vector<std::size_t> indices;  // ascending by index
};

inline SmallestK smallest_k_sqnorm(std::span<const double> m, std::size_t k) {
  if (k > m.size()) {
    throw RangeError("smallest_k_sqnorm: k=" + std::to_string(k) + " exceeds length " +
                     std::to_string(m.size()));
  }
  std::vector<std::size_t> order = ascending_order(m);
  order.resize(k);
  std::sort(order.begin(), order.end());
  SmallestK out;
  for (std::size_t i : order) out.value += m[i] * m[i];
  out.indices = std::move(order);
  return out;
}

/// Fraction of the original parameter count removed by units whose mask is
/// (numerically) zero.
inline double actual_sparsity(const MaskSet& masks, const ModelConfig& cfg, double total_params) {
  if (!(total_params > 0.0)) throw RangeError("actual_sparsity: M must be positive");
  std::size_t zero_heads = 0, zero_channels = 0;
  for (const Tensor& t : masks.head)
    for (double v : t.data()) zero_heads += std::abs(v) <= kZeroThreshold;
  for (const Tensor& t : masks.inter)
    for (double v : t.data()) zero_channels += std::abs(v) <= kZeroThreshold;
  const double removed = 4.0 * double(cfg.head_dim) * double(cfg.hidden) * double(zero_heads) +
                         3.0 * double(cfg.hidden) * double(zero_channels);
  return removed / total_params;
}

/// M(s) = M - L * (head_cost * s_head + channel_cost * s_inter), continuous in s.
inline double resource(const ResourceModel& rm, double s_head, double s_inter) {
  return rm.total -
         static_cast<double>(rm.layers) * (rm.head_cost * s_head + rm.channel_cost * s_inter);
}

inline double resource(const ResourceModel& rm, const SparsityState& s) {
  return resource(rm, s.s_head, s.s_inter);
}

/// sum_l ( ||m_head^l||^2_{ceil(s_head),2} + ||m_inter^l||^2_{ceil(s_inter),2} ),
/// without the multiplier.
inline double sparsity_mass(const MaskSet& masks, double s_head, double s_inter) {
  const std::size_t kh = ceil_count(s_head);
  const std::size_t ki = ceil_count(s_inter);
  double acc = 0.0;
  for (std::size_t l = 0; l < masks.layers(); ++l) {
    acc += smallest_k_sqnorm(masks.head[l].data(), kh).value;
    acc += smallest_k_sqnorm(masks.inter[l].data(), ki).value;
  }
  return acc;
}

/// y * sparsity_mass: the sparsity penalty of the minimax objective.
inline double sparsity_loss(const MaskSet& masks, const SparsityState& s) {
  if (s.y == 0.0) return 0.0;
  return s.y * sparsity_mass(masks, s.s_head, s.s_inter);
}

/// Closed-form minimizer of 0.5*||m - m_bar||^2 + eta1*y*||m||^2_{ceil(s),2}:
/// the ceil(s) entries of smallest magnitude are scaled by 1/(1 + 2*eta1*y),
/// everything else is kept. Exactly ceil(s) entries are shrunk; ties go to the
/// lowest index.
inline std::vector<double> prox(std::span<const double> m_bar, double s, double eta1, double y) {
  if (!(s >= 0.0)) throw RangeError("prox: s must be non-negative");
  if (!(eta1 >= 0.0) || !(y >= 0.0)) throw RangeError("prox: eta1 and y must be non-negative");
  std::vector<double> out(m_bar.begin(), m_bar.end());
  const std::size_t k = std::min(ceil_count(s), m_bar.size());
  const double factor = 1.0 / (1.0 + 2.0 * eta1 * y);
  const std::vector<std::size_t> order = ascending_order(m_bar);
  for (std::size_t r = 0; r < k; ++r) out[order[r]] *= factor;
  return out;
}

/// Straight-through proxy for d||m||^2_{s,2}/ds: the square of the
/// min(len, ceil(s)+1)-th smallest-magnitude entry.
inline double grad_s_sparsity(std::span<const double> m, double s) {
  if (m.empty()) throw RangeError("grad_s_sparsity: empty mask vector");
  const std::size_t rank = std::min(m.size(), ceil_count(s) + 1);
  std::vector<double> mags(m.size());
  std::transform(m.begin(), m.end(), mags.begin(), [](double v) { return std::abs(v); });
  std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(rank - 1), mags.end());
  const double v = mags[rank - 1];
  return v * v;
}

/// d/ds of z*(M(s) - M_prune) for one group: -z * L * unit_cost.
inline double grad_s_resource(const ResourceModel& rm, double z, Group g) {
  if (!(z >= 0.0)) throw RangeError("grad_s_resource: z must be non-negative");
  return -z * static_cast<double>(rm.layers) * rm.unit_cost(g);
}

}  // namespace maskprune
