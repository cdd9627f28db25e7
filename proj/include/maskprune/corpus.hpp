#pragma once

// Byte-level text corpus, train/eval split and window sampling.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "maskprune/errors.hpp"
#include "maskprune/minimax.hpp"

namespace maskprune {

/// Token ids are raw bytes (vocabulary 256). The last `eval_fraction` of the
/// stream is held out.
struct Corpus {
  std::vector<int> tokens;
  std::size_t split = 0;  // first eval token

  static Corpus from_text(std::string_view text, double eval_fraction = 0.1) {
    if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) {
      throw ConfigError("eval_fraction must lie in (0, 1)");
    }
    Corpus c;
    c.tokens.reserve(text.size());
    for (unsigned char ch : text) c.tokens.push_back(static_cast<int>(ch));
    c.split = c.tokens.size() -
              static_cast<std::size_t>(eval_fraction * static_cast<double>(c.tokens.size()));
    return c;
  }

  static Corpus load(const std::string& path, double eval_fraction = 0.1) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open corpus file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str(), eval_fraction);
  }

  std::span<const int> train() const { return {tokens.data(), split}; }
  std::span<const int> eval() const { return {tokens.data() + split, tokens.size() - split}; }
};

/// Cuts `seq_len + 1` token windows into (inputs, next-token targets).
inline Sequence window_at(std::span<const int> stream, std::size_t start, std::size_t seq_len) {
  if (start + seq_len + 1 > stream.size()) throw RangeError("window runs past end of stream");
  Sequence s;
  s.inputs.assign(stream.begin() + start, stream.begin() + start + seq_len);
  s.targets.assign(stream.begin() + start + 1, stream.begin() + start + seq_len + 1);
  return s;
}

/// Consecutive non-overlapping windows from the front of `stream`; at most
/// `max_windows` of them when that is non-zero.
inline std::vector<Sequence> chunk_windows(std::span<const int> stream, std::size_t seq_len,
                                           std::size_t max_windows = 0) {
  if (seq_len == 0) throw RangeError("seq_len must be >= 1");
  std::vector<Sequence> out;
  for (std::size_t start = 0; start + seq_len + 1 <= stream.size(); start += seq_len) {
    if (max_windows && out.size() == max_windows) break;
    out.push_back(window_at(stream, start, seq_len));
  }
  if (out.empty()) throw RangeError("stream shorter than one window");
  return out;
}

/// Uniformly random windows from a token stream, reproducible from the seed.
class BatchSampler {
 public:
  BatchSampler(std::span<const int> stream, std::size_t seq_len, std::size_t batch_size,
               std::uint64_t seed)
      : stream_(stream), seq_len_(seq_len), batch_size_(batch_size), rng_(seed) {
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (stream.size() < seq_len + 1) throw RangeError("stream shorter than one window");
  }

  Batch next() {
    std::uniform_int_distribution<std::size_t> pick(0, stream_.size() - seq_len_ - 1);
    Batch b;
    b.reserve(batch_size_);
    for (std::size_t i = 0; i < batch_size_; ++i) b.push_back(window_at(stream_, pick(rng_), seq_len_));
    return b;
  }

 private:
  std::span<const int> stream_;
  std::size_t seq_len_;
  std::size_t batch_size_;
  std::mt19937_64 rng_;
};

}  // namespace maskprune
