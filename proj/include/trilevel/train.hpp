#ifndef TRILEVEL_TRAIN_HPP
#define TRILEVEL_TRAIN_HPP

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "trilevel/checkpoint.hpp"
#include "trilevel/config.hpp"
#include "trilevel/data.hpp"
#include "trilevel/errors.hpp"
#include "trilevel/forgetting.hpp"
#include "trilevel/macs.hpp"
#include "trilevel/ops.hpp"
#include "trilevel/optim.hpp"
#include "trilevel/subset.hpp"
#include "trilevel/vit.hpp"

namespace trilevel {

/// How remove-and-restore ranks the active subset.
enum class RemovalPolicy { forgetting, random, class_balanced };

inline RemovalPolicy parse_removal_policy(const std::string& s) {
  if (s == "forgetting") return RemovalPolicy::forgetting;
  if (s == "random") return RemovalPolicy::random;
  if (s == "class_balanced") return RemovalPolicy::class_balanced;
  throw ConfigError("unknown removal policy '" + s + "'");
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0;
  double train_acc = 0;
  double val_acc = 0;
  std::vector<std::size_t> live_tokens;  // per encoder layer
  double effective_r_t = 1.0;
  std::size_t active_subset_size = 0;
  std::uint64_t epoch_macs = 0;
  double wall_seconds = 0;
};

struct TrainOptions {
  RemovalPolicy removal_policy = RemovalPolicy::forgetting;
  bool write_outputs = true;
  std::ostream* log = nullptr;
};

struct TrainResult {
  std::vector<EpochMetrics> metrics;
  std::vector<std::string> subset_log;
  std::vector<ExampleStats> example_stats;
  std::vector<std::uint8_t> checkpoint_bytes;
  std::uint64_t total_training_macs = 0;
  std::size_t training_forward_passes = 0;
  double final_val_acc = 0;
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string join_counts(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ";" : "") + std::to_string(v[i]);
  return s;
}

template <typename T>
std::size_t argmax_row(const Tensor<T>& logits, std::size_t row) {
  const std::size_t c = logits.cols();
  auto data = logits.data().subspan(row * c, c);
  return static_cast<std::size_t>(std::max_element(data.begin(), data.end()) - data.begin());
}

}  // namespace detail

inline const char* kMetricsHeader = "epoch,train_loss,train_acc,val_acc,live_tokens,effective_r_t,active_subset_size,epoch_macs";

inline std::string metrics_csv_row(const EpochMetrics& m) {
  return std::to_string(m.epoch) + "," + detail::fmt_double(m.train_loss) + "," + detail::fmt_double(m.train_acc) +
         "," + detail::fmt_double(m.val_acc) + "," + detail::join_counts(m.live_tokens) + "," +
         detail::fmt_double(m.effective_r_t) + "," + std::to_string(m.active_subset_size) + "," +
         std::to_string(m.epoch_macs);
}

/// Throws ConfigError when the images or labels do not fit the model.
inline void check_dataset(const RunConfig& cfg, const DatasetSplit& split) {
  for (const Dataset* d : {&split.train, &split.test}) {
    if (d->size() == 0) continue;
    if (d->image_size != cfg.model.image_size || d->channels != cfg.model.channels)
      throw ConfigError("dataset images are " + std::to_string(d->channels) + "x" + std::to_string(d->image_size) +
                        "^2 but the model expects " + std::to_string(cfg.model.channels) + "x" +
                        std::to_string(cfg.model.image_size) + "^2");
    if (d->num_classes > cfg.model.num_classes)
      throw ConfigError("dataset has " + std::to_string(d->num_classes) + " classes, model only " +
                        std::to_string(cfg.model.num_classes));
  }
}

/// Loads the split named by the config and checks it against the model geometry.
inline DatasetSplit load_dataset(const RunConfig& cfg) {
  DatasetSplit split;
  switch (cfg.dataset) {
    case DatasetKind::mnist: split = load_mnist(cfg.data_dir); break;
    case DatasetKind::cifar10: split = load_cifar10(cfg.data_dir); break;
    case DatasetKind::synthetic: {
      const auto sizes = parse_synthetic_sizes(cfg.data_dir);
      split.train = make_synthetic(sizes.train, cfg.model.num_classes, cfg.model.image_size, cfg.model.channels, 7);
      split.test = make_synthetic(sizes.test, cfg.model.num_classes, cfg.model.image_size, cfg.model.channels, 8);
      break;
    }
  }
  check_dataset(cfg, split);
  return split;
}

/// Top-1 accuracy over `data` with the given sparsity (null = dense) at `epoch`.
template <typename T>
double evaluate(const ViT<T>& model, const Dataset& data, const SparsityConfig* sparsity, std::size_t epoch) {
  if (data.size() == 0) return 0.0;
  NoGradGuard no_grad;
  std::vector<T> image(data.image_numel());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    normalize_into<T>(data.image(i), image);
    auto logits = model.forward_image(image, sparsity, epoch);
    if (detail::argmax_row(logits, 0) == static_cast<std::size_t>(data.labels[i])) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

template <typename T>
TrainResult train_typed(const RunConfig& cfg, const DatasetSplit& data, const TrainOptions& opts = {}) {
  cfg.validate();
  check_dataset(cfg, data);
  namespace fs = std::filesystem;
  const SparsityConfig& sp = cfg.sparsity;
  ViT<T> model(cfg.model, cfg.seed);
  AdamW<T> opt(model.parameters(), {cfg.base_lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  ForgettingTracker tracker(data.train.size());
  SubsetState subset = init_subset(data.train.size(), sp.r_e, cfg.seed, sp.removal_step_pct);
  const std::size_t stat_layer = sp.stat_layer(cfg.model.depth);
  const bool use_cls = cfg.model.use_cls_token;

  std::ofstream metrics_out, subset_out, timing_out;
  if (opts.write_outputs) {
    fs::create_directories(cfg.out_dir);
    metrics_out.open(fs::path(cfg.out_dir) / "metrics.csv", std::ios::trunc);
    metrics_out << kMetricsHeader << '\n';
    subset_out.open(fs::path(cfg.out_dir) / "subset_log.txt", std::ios::trunc);
    timing_out.open(fs::path(cfg.out_dir) / "timing.csv", std::ios::trunc);
    timing_out << "epoch,wall_seconds\n";
  }

  TrainResult result;
  std::size_t step = 0;
  std::vector<std::vector<T>> images;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    opt.set_lr(learning_rate_at(epoch, cfg.epochs, cfg.lr_warmup_epochs, cfg.base_lr));
    std::seed_seq epoch_seq{cfg.seed, static_cast<std::uint64_t>(epoch), std::uint64_t{0x5eed}};
    std::mt19937_64 rng(epoch_seq);
    std::vector<std::size_t> order = subset.active;
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0;
    std::size_t correct = 0;
    std::vector<std::size_t> live_tokens;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::size_t b = end - start;
      images.resize(b);
      std::vector<std::span<const T>> views;
      std::vector<int> labels(b);
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t id = order[start + i];
        images[i].resize(data.train.image_numel());
        augment_into<T>(data.train.image(id), data.train.channels, data.train.image_size, rng, images[i]);
        views.emplace_back(images[i]);
        labels[i] = data.train.labels[id];
      }
      std::vector<ForwardTrace<T>> traces(b);
      for (auto& tr : traces) {
        tr.keep_all_records = false;
        tr.stat_layer = stat_layer;
      }
      auto logits = model.forward(views, &sp, epoch, &traces);
      auto loss = ops::cross_entropy(logits, std::span<const int>(labels));
      result.training_forward_passes += b;
      const double loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value))
        throw DivergenceError("loss became " + detail::fmt_double(loss_value) + " at step " + std::to_string(step),
                              step);
      loss_sum += loss_value * static_cast<double>(b);

      std::vector<std::size_t> by_id(b);
      std::iota(by_id.begin(), by_id.end(), 0);
      std::sort(by_id.begin(), by_id.end(), [&](std::size_t x, std::size_t y) { return order[start + x] < order[start + y]; });
      for (std::size_t i : by_id) {
        const bool ok = detail::argmax_row(logits, i) == static_cast<std::size_t>(labels[i]);
        correct += ok;
        const auto* rec = traces[i].record_for(stat_layer);
        tracker.record(order[start + i], ok, rec ? attention_statistic(*rec, use_cls) : 0.0);
      }
      if (live_tokens.empty()) live_tokens = traces.front().live_tokens_per_layer;

      backward(loss);
      opt.step();
      ++step;
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = order.empty() ? 0.0 : loss_sum / static_cast<double>(order.size());
    m.train_acc = order.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(order.size());
    m.val_acc = evaluate(model, data.test, &sp, epoch);
    m.live_tokens = live_tokens;
    m.effective_r_t = sp.has_selectors() ? effective_token_ratio(sp, epoch) : 1.0;
    m.active_subset_size = order.size();
    m.epoch_macs = per_image_macs_at_epoch(cfg.model, sp, epoch) * order.size();
    result.total_training_macs += m.epoch_macs;

    const std::size_t completed = epoch + 1;
    if (schedule_hook(completed, sp, subset)) {
      std::vector<std::size_t> ranking;
      switch (opts.removal_policy) {
        case RemovalPolicy::forgetting: ranking = tracker.rank(subset.active, sp.tiebreak_direction); break;
        case RemovalPolicy::random: ranking = random_ranking(subset.active, cfg.seed ^ (completed * 0x9e3779b97f4a7c15ULL)); break;
        case RemovalPolicy::class_balanced: {
          const auto count = static_cast<std::size_t>(
              std::floor(sp.removal_step_pct * static_cast<double>(data.train.size()) / 100.0 + 1e-9));
          ranking = class_balanced_ranking(tracker.all(), subset.active, data.train.labels, count,
                                           sp.tiebreak_direction);
          break;
        }
      }
      const auto outcome = remove_and_restore(subset, ranking, sp.removal_step_pct);
      result.subset_log.push_back(subset_log_line(completed, outcome, subset));
      if (opts.write_outputs) subset_out << result.subset_log.back() << '\n' << std::flush;
    }
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (opts.write_outputs) {
      metrics_out << metrics_csv_row(m) << '\n' << std::flush;
      timing_out << epoch << ',' << detail::fmt_double(m.wall_seconds) << '\n' << std::flush;
    }
    if (opts.log)
      *opts.log << "epoch " << epoch << " loss " << m.train_loss << " train_acc " << m.train_acc << " val_acc "
                << m.val_acc << " r_t " << m.effective_r_t << " active " << m.active_subset_size << " ("
                << m.wall_seconds << " s)\n"
                << std::flush;
    result.metrics.push_back(std::move(m));
  }

  result.final_val_acc = result.metrics.empty() ? 0.0 : result.metrics.back().val_acc;
  result.example_stats.assign(tracker.all().begin(), tracker.all().end());
  result.checkpoint_bytes = encode_checkpoint(make_checkpoint(model, cfg));
  if (opts.write_outputs) {
    const fs::path out(cfg.out_dir);
    std::ofstream stats(out / "examples_stats.csv", std::ios::trunc);
    tracker.write_csv(stats);
    std::ofstream ck(out / "checkpoint.bin", std::ios::binary | std::ios::trunc);
    ck.write(reinterpret_cast<const char*>(result.checkpoint_bytes.data()),
             static_cast<std::streamsize>(result.checkpoint_bytes.size()));
    CostReport report = sp.has_selectors() ? sparse_macs(cfg.model, sp) : dense_macs(cfg.model);
    report = with_training(report, cfg.model, sp, cfg.epochs, data.train.size());
    std::ofstream cost(out / "cost_report.json", std::ios::trunc);
    cost << to_json(report).dump(2) << '\n';
  }
  return result;
}

/// Trains at the configured precision.
inline TrainResult train(const RunConfig& cfg, const DatasetSplit& data, const TrainOptions& opts = {}) {
  return cfg.precision == Precision::f64 ? train_typed<double>(cfg, data, opts) : train_typed<float>(cfg, data, opts);
}

inline TrainResult train(const RunConfig& cfg, const TrainOptions& opts = {}) {
  return train(cfg, load_dataset(cfg), opts);
}

/// Accuracy of a saved model. Without an override the stored sparsity is used at its
/// post-warm-up ratios.
inline double evaluate_checkpoint(const Checkpoint& ck, const Dataset& data,
                                  const std::optional<SparsityConfig>& sparsity_override = std::nullopt) {
  const RunConfig cfg = config_from_meta(ck.meta);
  if (data.image_size != cfg.model.image_size || data.channels != cfg.model.channels)
    throw IncompatibilityError("dataset images do not match the checkpoint's model geometry");
  const SparsityConfig sp = sparsity_override.value_or(cfg.sparsity);
  sp.validate(cfg.model.depth);
  const std::size_t epoch = std::max(cfg.epochs, sp.rt_warmup_epochs);
  auto run = [&](auto tag) {
    using T = decltype(tag);
    ViT<T> model(cfg.model, 0);
    load_parameters(model, ck);
    return evaluate(model, data, &sp, epoch);
  };
  const bool f64 = !ck.tensors.empty() && ck.tensors.front().elem_size == 8;
  return f64 ? run(double{}) : run(float{});
}

}  // namespace trilevel

#endif  // TRILEVEL_TRAIN_HPP
