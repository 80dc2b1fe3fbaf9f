#ifndef TRILEVEL_SUBSET_HPP
#define TRILEVEL_SUBSET_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "trilevel/errors.hpp"
#include "trilevel/forgetting.hpp"
#include "trilevel/selector.hpp"

namespace trilevel {

/// Partition of the dataset into the active training subset and the removed pool.
struct SubsetState {
  std::vector<std::size_t> active;  // ascending
  std::vector<std::size_t> pool;    // insertion order
  std::size_t dataset_size = 0;
  std::size_t iteration = 0;
  std::size_t max_iterations = 0;
  std::uint64_t rng_seed = 0;
};

namespace detail {
inline double removed_pct(double r_e) {
  // Rounded so that e.g. 1 - 0.9 lands on exactly 10.
  return std::round((1.0 - r_e) * 100.0 * 1e6) / 1e6;
}
}  // namespace detail

/// Remove-and-restore iterations needed to cycle the removed m% through in steps of n%.
inline std::size_t subset_iteration_cap(double r_e, double n_pct) {
  const double m = detail::removed_pct(r_e);
  if (m <= 0.0) return 0;
  return static_cast<std::size_t>(std::ceil(m / n_pct - 1e-9)) + 1;
}

/// Uniformly removes m% = (1 - r_e) of the ids before training.
inline SubsetState init_subset(std::size_t dataset_size, double r_e, std::uint64_t seed, double n_pct = 5.0) {
  if (!(r_e > 0.0 && r_e <= 1.0)) throw ConfigError("r_e must lie in (0,1], got " + std::to_string(r_e));
  SubsetState s;
  s.dataset_size = dataset_size;
  s.rng_seed = seed;
  s.max_iterations = subset_iteration_cap(r_e, n_pct);
  std::vector<std::size_t> ids(dataset_size);
  std::iota(ids.begin(), ids.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  const std::size_t keep = static_cast<std::size_t>(std::llround(r_e * static_cast<double>(dataset_size)));
  s.active.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(keep));
  s.pool.assign(ids.begin() + static_cast<std::ptrdiff_t>(keep), ids.end());
  std::sort(s.active.begin(), s.active.end());
  return s;
}

/// Outcome of one remove-and-restore call.
struct RestoreOutcome {
  bool exhausted = false;  // iteration cap reached; nothing changed
  std::size_t removed = 0;
  std::size_t restored = 0;
};

/// Moves the first floor(n% of |D|) ids of `ranking` (least informative first) into the
/// pool, shuffles the pool, and moves the same number back from its front.
inline RestoreOutcome remove_and_restore(SubsetState& state, std::span<const std::size_t> ranking, double n_pct,
                                         bool shuffle_pool = true) {
  RestoreOutcome out;
  if (state.iteration >= state.max_iterations) {
    out.exhausted = true;
    return out;
  }
  std::vector<std::size_t> ranked(ranking.begin(), ranking.end());
  std::sort(ranked.begin(), ranked.end());
  for (std::size_t id : state.active)
    if (!std::binary_search(ranked.begin(), ranked.end(), id))
      throw StalenessError("ranking is missing active example " + std::to_string(id));

  const std::size_t count = std::min(
      state.active.size(),
      static_cast<std::size_t>(std::floor(n_pct * static_cast<double>(state.dataset_size) / 100.0 + 1e-9)));
  std::vector<std::size_t> removed;
  removed.reserve(count);
  for (std::size_t id : ranking) {
    if (removed.size() == count) break;
    if (std::binary_search(state.active.begin(), state.active.end(), id)) removed.push_back(id);
  }
  std::vector<std::size_t> removed_sorted = removed;
  std::sort(removed_sorted.begin(), removed_sorted.end());
  std::vector<std::size_t> remaining;
  remaining.reserve(state.active.size());
  std::set_difference(state.active.begin(), state.active.end(), removed_sorted.begin(), removed_sorted.end(),
                      std::back_inserter(remaining));

  state.pool.insert(state.pool.end(), removed.begin(), removed.end());
  if (shuffle_pool) {
    std::seed_seq seq{state.rng_seed, static_cast<std::uint64_t>(state.iteration + 1)};
    std::mt19937_64 rng(seq);
    std::shuffle(state.pool.begin(), state.pool.end(), rng);
  }
  const std::size_t take = std::min(count, state.pool.size());
  remaining.insert(remaining.end(), state.pool.begin(), state.pool.begin() + static_cast<std::ptrdiff_t>(take));
  state.pool.erase(state.pool.begin(), state.pool.begin() + static_cast<std::ptrdiff_t>(take));
  std::sort(remaining.begin(), remaining.end());
  state.active = std::move(remaining);
  ++state.iteration;
  out.removed = removed.size();
  out.restored = take;
  return out;
}

/// Whether a remove-and-restore is due after `epoch` completed epochs.
inline bool schedule_hook(std::size_t epoch, const SparsityConfig& cfg, const SubsetState& state) {
  return epoch > 0 && cfg.update_period_epochs > 0 && epoch % cfg.update_period_epochs == 0 &&
         state.iteration < state.max_iterations;
}

/// FNV-1a over the ascending active ids, each as 8 little-endian bytes.
inline std::uint64_t subset_digest(std::span<const std::size_t> ids) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t id : ids) {
    std::uint64_t v = id;
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

inline std::string subset_log_line(std::size_t epoch, const RestoreOutcome& outcome, const SubsetState& state) {
  char digest[17];
  std::snprintf(digest, sizeof digest, "%016llx", static_cast<unsigned long long>(subset_digest(state.active)));
  return "epoch=" + std::to_string(epoch) + " removed=" + std::to_string(outcome.removed) +
         " restored=" + std::to_string(outcome.restored) + " active=" + std::to_string(state.active.size()) +
         " iteration=" + std::to_string(state.iteration) + " digest=" + digest;
}

/// Baseline ranking: a seeded uniform permutation of the active set.
inline std::vector<std::size_t> random_ranking(std::span<const std::size_t> active, std::uint64_t seed) {
  std::vector<std::size_t> out(active.begin(), active.end());
  std::mt19937_64 rng(seed);
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

/// Baseline ranking that removes the same share from every class: the first `count`
/// entries take each class's least informative examples in proportion to its size.
inline std::vector<std::size_t> class_balanced_ranking(std::span<const ExampleStats> stats,
                                                       std::span<const std::size_t> active,
                                                       std::span<const int> labels, std::size_t count,
                                                       TiebreakDirection direction) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t id : rank_for_removal(stats, active, direction)) by_class[labels[id]].push_back(id);
  std::vector<std::size_t> head, tail;
  const double share = active.empty() ? 0.0 : static_cast<double>(count) / static_cast<double>(active.size());
  for (auto& [label, ids] : by_class) {
    const auto take = std::min(ids.size(), static_cast<std::size_t>(std::llround(share * static_cast<double>(ids.size()))));
    head.insert(head.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(take));
    tail.insert(tail.end(), ids.begin() + static_cast<std::ptrdiff_t>(take), ids.end());
  }
  head.insert(head.end(), tail.begin(), tail.end());
  return head;
}

}  // namespace trilevel

#endif  // TRILEVEL_SUBSET_HPP
