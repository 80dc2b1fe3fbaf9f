#ifndef TRILEVEL_ATTENTION_RECORD_HPP
#define TRILEVEL_ATTENTION_RECORD_HPP

#include <cstddef>
#include <vector>

namespace trilevel {

/// Post-softmax attention of one encoder layer, [heads x L' x L'], where L' is the
/// number of live tokens. `live_tokens[i]` is the original token index of row/column i;
/// when the model has a [CLS] token it is original index 0 and always live at position 0.
template <typename T>
struct AttentionRecord {
  std::size_t layer = 0;
  std::size_t heads = 0;
  std::size_t tokens = 0;
  bool has_cls = false;
  std::vector<T> probs;
  std::vector<std::size_t> live_tokens;

  T prob(std::size_t h, std::size_t i, std::size_t j) const { return probs[(h * tokens + i) * tokens + j]; }

  /// Head-averaged probability, accumulated in double.
  double mean_prob(std::size_t i, std::size_t j) const {
    double acc = 0;
    for (std::size_t h = 0; h < heads; ++h) acc += static_cast<double>(prob(h, i, j));
    return acc / static_cast<double>(heads);
  }

  std::size_t patch_count() const { return has_cls ? tokens - 1 : tokens; }
  std::size_t first_patch() const { return has_cls ? 1 : 0; }
};

}  // namespace trilevel

#endif  // TRILEVEL_ATTENTION_RECORD_HPP
