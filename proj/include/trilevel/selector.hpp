#ifndef TRILEVEL_SELECTOR_HPP
#define TRILEVEL_SELECTOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "trilevel/attention_record.hpp"
#include "trilevel/errors.hpp"
#include "trilevel/optim.hpp"

namespace trilevel {

enum class TiebreakDirection { low_variance_first, high_variance_first };

/// Keep ratios and schedules for the three sparsity levels.
struct SparsityConfig {
  double r_e = 1.0;
  double r_t = 1.0;
  double r_a = 1.0;
  std::vector<std::size_t> prune_layers;  // 1-based; the selector runs before each
  std::size_t rt_warmup_epochs = 0;
  std::size_t update_period_epochs = 30;
  double removal_step_pct = 5.0;
  double initial_removal_pct = 0.0;
  std::size_t variance_layer = 0;  // 1-based; 0 picks the default layer
  TiebreakDirection tiebreak_direction = TiebreakDirection::low_variance_first;

  /// No example, token or attention sparsity at all.
  static SparsityConfig dense() { return {}; }

  /// All three ratios set to `ratio`, with m derived from r_e.
  static SparsityConfig tri_level(double ratio, std::vector<std::size_t> layers) {
    SparsityConfig s;
    s.r_e = s.r_t = s.r_a = ratio;
    s.prune_layers = std::move(layers);
    s.initial_removal_pct = (1.0 - ratio) * 100.0;
    return s;
  }

  bool has_selectors() const { return !prune_layers.empty(); }
  bool prunes_before(std::size_t layer) const {
    return std::find(prune_layers.begin(), prune_layers.end(), layer) != prune_layers.end();
  }

  /// Layer whose attention map feeds the example statistic: the configured one, else the
  /// layer before the first selector, else the last layer.
  std::size_t stat_layer(std::size_t depth) const {
    if (variance_layer != 0) return variance_layer;
    if (!prune_layers.empty()) return prune_layers.front() - 1;
    return depth;
  }

  void validate(std::size_t depth) const {
    auto in_unit = [](double r) { return r > 0.0 && r <= 1.0; };
    if (!in_unit(r_e)) throw ConfigError("r_e must lie in (0,1], got " + std::to_string(r_e));
    if (!in_unit(r_t)) throw ConfigError("r_t must lie in (0,1], got " + std::to_string(r_t));
    if (!in_unit(r_a)) throw ConfigError("r_a must lie in (0,1], got " + std::to_string(r_a));
    if (std::abs(initial_removal_pct - (1.0 - r_e) * 100.0) > 1e-6)
      throw ConfigError("initial_removal_pct " + std::to_string(initial_removal_pct) + " disagrees with r_e " +
                        std::to_string(r_e));
    if (r_e < 1.0 && !(removal_step_pct > 0.0))
      throw ConfigError("removal_step_pct must be positive when r_e < 1");
    if (removal_step_pct > initial_removal_pct && r_e < 1.0)
      throw ConfigError("removal_step_pct must not exceed initial_removal_pct");
    if (update_period_epochs == 0) throw ConfigError("update_period_epochs must be at least 1");
    for (std::size_t i = 0; i < prune_layers.size(); ++i) {
      std::size_t l = prune_layers[i];
      if (l < 2 || l > depth)
        throw ConfigError("prune layer " + std::to_string(l) + " outside [2, " + std::to_string(depth) + "]");
      if (i > 0 && l <= prune_layers[i - 1]) throw ConfigError("prune_layers must be strictly increasing");
    }
    if (variance_layer > depth) throw ConfigError("variance_layer " + std::to_string(variance_layer) + " > depth");
  }
};

/// Number of items kept out of `n` at `ratio`: ceiling, at least 1, at most n.
inline std::size_t keep_count(double ratio, std::size_t n) {
  if (n == 0) return 0;
  // The slack absorbs representation error such as 0.7 * 10 = 7.000000000000001.
  double want = std::ceil(ratio * static_cast<double>(n) - 1e-9);
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::max(want, 1.0)), 1, n);
}

/// R_T in effect at `epoch`: warms up from 1.0 to the target along a cosine.
inline double effective_token_ratio(const SparsityConfig& cfg, std::size_t epoch) {
  if (cfg.rt_warmup_epochs == 0) return cfg.r_t;
  return cosine_schedule(static_cast<double>(epoch), static_cast<double>(cfg.rt_warmup_epochs), 1.0, cfg.r_t);
}

/// Live patch-token counts after each selector stage, starting from `patches`.
inline std::vector<std::size_t> stage_token_counts(std::size_t patches, double r_t, std::size_t stages) {
  std::vector<std::size_t> out;
  for (std::size_t s = 0; s < stages; ++s) {
    patches = keep_count(r_t, patches);
    out.push_back(patches);
  }
  return out;
}

/// The selector's output. Indices are original token indices.
struct SelectionMask {
  std::vector<std::size_t> kept_tokens;             // ascending, [CLS] first when present
  std::vector<std::vector<std::size_t>> kept_keys;  // one ascending set per kept token
  std::size_t k_count = 0;                          // kept patch tokens
  bool has_cls = false;
  double effective_r_t = 1.0;
};

/// Importance score of every live patch token, in live order.
///
/// With [CLS]: the head-averaged [CLS] attention row without its own column.
/// Without: column sums of the head-averaged attention matrix.
template <typename T>
std::vector<double> token_scores(const AttentionRecord<T>& rec, bool use_cls) {
  const std::size_t first = use_cls ? 1 : 0;
  std::vector<double> scores(rec.tokens - first, 0.0);
  if (use_cls) {
    for (std::size_t j = first; j < rec.tokens; ++j) scores[j - first] = rec.mean_prob(0, j);
  } else {
    for (std::size_t i = 0; i < rec.tokens; ++i)
      for (std::size_t j = 0; j < rec.tokens; ++j) scores[j] += rec.mean_prob(i, j);
  }
  return scores;
}

namespace detail {
// Indices of the `k` largest scores, ties toward the lower index.
inline std::vector<std::size_t> top_k(const std::vector<double>& scores, std::size_t k,
                                      const std::vector<std::size_t>& candidates) {
  std::vector<std::size_t> idx = candidates;
  k = std::min(k, idx.size());
  auto better = [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
  idx.resize(k);
  return idx;
}
}  // namespace detail

/// Positions (into `scores`) of the ceil(r_t * count) best patch tokens, ascending.
inline std::vector<std::size_t> select_tokens(const std::vector<double>& scores, double r_t,
                                              std::size_t current_patch_count) {
  if (scores.size() != current_patch_count)
    throw DimensionError("select_tokens got " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(current_patch_count) + " patches");
  std::vector<std::size_t> all(scores.size());
  std::iota(all.begin(), all.end(), 0);
  auto kept = detail::top_k(scores, keep_count(r_t, current_patch_count), all);
  std::sort(kept.begin(), kept.end());
  return kept;
}

/// Per-query key sets over the kept tokens (original indices, one set per kept token).
///
/// Each kept patch query keeps max(1, ceil(r_a * K)) patch keys: itself plus its
/// best-scoring other kept patches under the head-averaged attention. The [CLS] key is
/// added on top, and the [CLS] query keeps every kept token.
template <typename T>
std::vector<std::vector<std::size_t>> select_attention(const AttentionRecord<T>& rec,
                                                       const std::vector<std::size_t>& kept_tokens, double r_a) {
  std::unordered_map<std::size_t, std::size_t> pos;
  for (std::size_t i = 0; i < rec.live_tokens.size(); ++i) pos[rec.live_tokens[i]] = i;
  std::vector<std::size_t> local;
  local.reserve(kept_tokens.size());
  for (std::size_t t : kept_tokens) {
    auto it = pos.find(t);
    if (it == pos.end())
      throw SelectorContractError("kept token " + std::to_string(t) + " is not live in layer " +
                                  std::to_string(rec.layer));
    local.push_back(it->second);
  }
  const bool cls = rec.has_cls && !kept_tokens.empty() && kept_tokens.front() == 0;
  const std::size_t first = cls ? 1 : 0;
  const std::size_t k_count = kept_tokens.size() - first;
  const std::size_t k = keep_count(r_a, k_count);

  std::vector<std::vector<std::size_t>> out(kept_tokens.size());
  if (cls) out[0] = kept_tokens;
  std::vector<double> row(kept_tokens.size());
  for (std::size_t q = first; q < kept_tokens.size(); ++q) {
    std::vector<std::size_t> others;
    others.reserve(k_count);
    for (std::size_t j = first; j < kept_tokens.size(); ++j) {
      row[j] = rec.mean_prob(local[q], local[j]);
      if (j != q) others.push_back(j);
    }
    std::vector<std::size_t> keys = detail::top_k(row, k - 1, others);
    keys.push_back(q);
    if (cls) keys.push_back(0);
    std::vector<std::size_t>& set = out[q];
    for (std::size_t j : keys) set.push_back(kept_tokens[j]);
    std::sort(set.begin(), set.end());
  }
  return out;
}

/// Token then attention selection from the attention map of the preceding layer.
template <typename T>
SelectionMask ta_select(const AttentionRecord<T>& rec, const SparsityConfig& cfg, std::size_t epoch) {
  SelectionMask mask;
  mask.has_cls = rec.has_cls;
  mask.effective_r_t = effective_token_ratio(cfg, epoch);
  auto scores = token_scores(rec, rec.has_cls);
  auto positions = select_tokens(scores, mask.effective_r_t, rec.patch_count());
  if (rec.has_cls) mask.kept_tokens.push_back(rec.live_tokens[0]);
  for (std::size_t p : positions) mask.kept_tokens.push_back(rec.live_tokens[p + rec.first_patch()]);
  std::sort(mask.kept_tokens.begin(), mask.kept_tokens.end());
  mask.k_count = positions.size();
  mask.kept_keys = select_attention(rec, mask.kept_tokens, cfg.r_a);
  return mask;
}

}  // namespace trilevel

#endif  // TRILEVEL_SELECTOR_HPP
