#pragma once

// Per-layer mask value distributions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

#include "maskprune/model.hpp"
#include "maskprune/sparsity.hpp"

namespace maskprune {

inline constexpr double kHistBinWidth = 0.05;
inline constexpr std::size_t kHistBins = 20;  // [0,0.05), ..., [0.95,1.0]

struct GroupStats {
  std::vector<std::size_t> histogram = std::vector<std::size_t>(kHistBins, 0);
  double mean = 0.0;
  std::size_t retained = 0;  // entries above the zero threshold
};

struct LayerMaskStats {
  GroupStats head;
  GroupStats inter;
};

inline std::size_t hist_bin(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return std::min(kHistBins - 1, static_cast<std::size_t>(std::floor(c / kHistBinWidth)));
}

inline GroupStats group_stats(const Tensor& m) {
  GroupStats g;
  for (double v : m.data()) {
    ++g.histogram[hist_bin(v)];
    g.mean += v;
    g.retained += std::abs(v) > kZeroThreshold;
  }
  if (m.size()) g.mean /= static_cast<double>(m.size());
  return g;
}

inline std::vector<LayerMaskStats> mask_stats(const MaskSet& masks) {
  std::vector<LayerMaskStats> out;
  for (std::size_t l = 0; l < masks.layers(); ++l) {
    out.push_back({group_stats(masks.head[l]), group_stats(masks.inter[l])});
  }
  return out;
}

/// One row per mask entry: layer,group,unit,value.
inline void write_mask_values_csv(std::ostream& os, const MaskSet& masks) {
  os.precision(17);
  os << "layer,group,unit,value\n";
  for (std::size_t l = 0; l < masks.layers(); ++l) {
    for (std::size_t j = 0; j < masks.head[l].size(); ++j)
      os << l << ",head," << j << ',' << masks.head[l][j] << '\n';
    for (std::size_t c = 0; c < masks.inter[l].size(); ++c)
      os << l << ",inter," << c << ',' << masks.inter[l][c] << '\n';
  }
}

/// One row per (layer, group, bin): layer,group,bin_lo,bin_hi,count.
inline void write_mask_hist_csv(std::ostream& os, const std::vector<LayerMaskStats>& stats) {
  os << "layer,group,bin_lo,bin_hi,count\n";
  for (std::size_t l = 0; l < stats.size(); ++l) {
    for (const auto& [name, g] : {std::pair<const char*, const GroupStats&>{"head", stats[l].head},
                                  {"inter", stats[l].inter}}) {
      for (std::size_t b = 0; b < kHistBins; ++b) {
        os << l << ',' << name << ',' << double(b) * kHistBinWidth << ','
           << double(b + 1) * kHistBinWidth << ',' << g.histogram[b] << '\n';
      }
    }
  }
}

}  // namespace maskprune
