#ifndef TRILEVEL_FORGETTING_HPP
#define TRILEVEL_FORGETTING_HPP

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "trilevel/attention_record.hpp"
#include "trilevel/errors.hpp"
#include "trilevel/selector.hpp"

namespace trilevel {

/// Learning history of one training example.
struct ExampleStats {
  std::size_t example_id = 0;
  std::optional<bool> prev_correct;
  std::size_t forget_count = 0;
  std::size_t learn_count = 0;
  bool ever_learned = false;
  double attn_stat = 0.0;
  std::size_t visits = 0;
};

/// Applies one classification outcome. A forgetting event is correct -> wrong between
/// consecutive visits; a learning event is (unset or wrong) -> correct.
inline ExampleStats record_visit(ExampleStats stats, bool correct, double attn_stat) {
  const bool was_correct = stats.prev_correct.value_or(false);
  if (was_correct && !correct) ++stats.forget_count;
  if (!was_correct && correct) {
    ++stats.learn_count;
    stats.ever_learned = true;
  }
  stats.prev_correct = correct;
  stats.attn_stat = attn_stat;
  ++stats.visits;
  return stats;
}

namespace detail {
inline double population_variance(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double acc = 0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return acc / static_cast<double>(v.size());
}
}  // namespace detail

/// Variance of the head-averaged [CLS] attention over live patch tokens, or, without
/// [CLS], of the cumulative attention column sums normalized to sum 1.
template <typename T>
double attention_statistic(const AttentionRecord<T>& rec, bool use_cls) {
  std::vector<double> v = token_scores(rec, use_cls);
  if (!use_cls) {
    double total = 0;
    for (double x : v) total += x;
    if (total > 0)
      for (double& x : v) x /= total;
  }
  return detail::population_variance(v);
}

/// Ordering of `ids`, least informative first.
///
/// Key: forget_count ascending, never-learned examples last, then attn_stat in
/// `direction`, then example id.
inline std::vector<std::size_t> rank_for_removal(std::span<const ExampleStats> all_stats,
                                                 std::span<const std::size_t> ids, TiebreakDirection direction) {
  std::vector<std::size_t> out(ids.begin(), ids.end());
  for (std::size_t id : out) {
    if (id >= all_stats.size()) throw IndexError("example id " + std::to_string(id) + " has no statistics");
    if (all_stats[id].visits == 0)
      throw StalenessError("example " + std::to_string(id) + " is active but was never visited");
  }
  const bool low_first = direction == TiebreakDirection::low_variance_first;
  std::sort(out.begin(), out.end(), [&](std::size_t a, std::size_t b) {
    const ExampleStats& x = all_stats[a];
    const ExampleStats& y = all_stats[b];
    if (x.ever_learned != y.ever_learned) return x.ever_learned;
    if (x.forget_count != y.forget_count) return x.forget_count < y.forget_count;
    if (x.attn_stat != y.attn_stat) return low_first ? x.attn_stat < y.attn_stat : x.attn_stat > y.attn_stat;
    return a < b;
  });
  return out;
}

/// Stats for the whole dataset, indexed by example id.
class ForgettingTracker {
 public:
  explicit ForgettingTracker(std::size_t dataset_size) : stats_(dataset_size) {
    for (std::size_t i = 0; i < dataset_size; ++i) stats_[i].example_id = i;
  }

  void record(std::size_t id, bool correct, double attn_stat) {
    if (id >= stats_.size()) throw IndexError("example id " + std::to_string(id) + " out of range");
    stats_[id] = record_visit(stats_[id], correct, attn_stat);
  }

  std::vector<std::size_t> rank(std::span<const std::size_t> active, TiebreakDirection direction) const {
    return rank_for_removal(stats_, active, direction);
  }

  const ExampleStats& operator[](std::size_t id) const { return stats_.at(id); }
  std::span<const ExampleStats> all() const { return stats_; }
  std::size_t size() const { return stats_.size(); }

  /// CSV: example_id,forget_count,learn_count,attn_stat,visits
  void write_csv(std::ostream& os) const {
    os << "example_id,forget_count,learn_count,attn_stat,visits\n";
    char buf[64];
    for (const auto& s : stats_) {
      auto res = std::to_chars(buf, buf + sizeof buf, s.attn_stat);
      os << s.example_id << ',' << s.forget_count << ',' << s.learn_count << ','
         << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf)) << ',' << s.visits << '\n';
    }
  }

 private:
  std::vector<ExampleStats> stats_;
};

}  // namespace trilevel

#endif  // TRILEVEL_FORGETTING_HPP
