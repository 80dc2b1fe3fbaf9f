#ifndef TRILEVEL_MACS_HPP
#define TRILEVEL_MACS_HPP

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "trilevel/errors.hpp"
#include "trilevel/mac_counter.hpp"
#include "trilevel/selector.hpp"
#include "trilevel/vit.hpp"

namespace trilevel {

/// Forward-pass multiply-accumulate counts. Softmax, normalization, activations and
/// additions are not MACs.
struct CostReport {
  std::vector<LayerCost> per_layer;
  std::uint64_t embed_macs = 0;
  std::uint64_t head_macs = 0;
  std::uint64_t total_per_image = 0;
  std::uint64_t dense_per_image = 0;
  double saving_vs_dense = 0.0;

  // Whole-run figures; zero until with_training() fills them.
  std::size_t epochs = 0;
  std::size_t dataset_size = 0;
  std::size_t active_size = 0;
  std::uint64_t training_total = 0;
  std::uint64_t dense_training_total = 0;
  double training_saving_vs_dense = 0.0;

  std::uint64_t component_sum() const {
    std::uint64_t s = embed_macs + head_macs;
    for (const auto& l : per_layer) s += l.total();
    return s;
  }
};

namespace detail {

inline double saving(std::uint64_t sparse, std::uint64_t dense) {
  if (dense == 0 || sparse >= dense) return 0.0;
  return 1.0 - static_cast<double>(sparse) / static_cast<double>(dense);
}

// Per-image cost with token keep ratio `r_t` in effect; `sparsity` may be null (dense).
inline CostReport per_image_cost(const ViTConfig& cfg, const SparsityConfig* sparsity, double r_t) {
  CostReport rep;
  const std::uint64_t d = cfg.d_model, hid = cfg.hidden();
  const std::uint64_t cls = cfg.use_cls_token ? 1 : 0;
  rep.embed_macs = static_cast<std::uint64_t>(cfg.patches()) * cfg.patch_dim() * d;
  rep.head_macs = d * cfg.num_classes;
  const bool selecting = sparsity && sparsity->has_selectors();
  std::size_t patches = cfg.patches();
  bool stage_masked = false;
  for (std::size_t layer = 1; layer <= cfg.depth; ++layer) {
    if (selecting && sparsity->prunes_before(layer)) {
      patches = keep_count(r_t, patches);
      stage_masked = sparsity->r_a < 1.0;
    }
    const bool feeds_selector = selecting && sparsity->prunes_before(layer + 1);
    const std::uint64_t live = patches + cls;
    std::uint64_t pairs = live * live;
    if (stage_masked && !feeds_selector) {
      const std::uint64_t k = keep_count(sparsity->r_a, patches);
      pairs = cls ? patches * (k + 1) + live : patches * k;
    }
    LayerCost lc;
    lc.layer = layer;
    lc.qkv_macs = live * d * 3 * d;
    lc.attn_logit_macs = pairs * d;
    lc.attn_value_macs = pairs * d;
    lc.proj_macs = live * d * d;
    lc.ffn_macs = 2 * live * d * hid;
    rep.per_layer.push_back(lc);
  }
  rep.total_per_image = rep.component_sum();
  return rep;
}

}  // namespace detail

/// Closed-form cost of the plain model.
inline CostReport dense_macs(const ViTConfig& cfg) {
  cfg.validate();
  CostReport rep = detail::per_image_cost(cfg, nullptr, 1.0);
  rep.dense_per_image = rep.total_per_image;
  return rep;
}

/// Closed-form cost under token and attention sparsity, at the post-warm-up R_T.
inline CostReport sparse_macs(const ViTConfig& cfg, const SparsityConfig& sparsity) {
  cfg.validate();
  sparsity.validate(cfg.depth);
  CostReport rep = detail::per_image_cost(cfg, &sparsity, sparsity.r_t);
  rep.dense_per_image = detail::per_image_cost(cfg, nullptr, 1.0).total_per_image;
  rep.saving_vs_dense = detail::saving(rep.total_per_image, rep.dense_per_image);
  return rep;
}

/// Cost at a given epoch, honoring the R_T warm-up.
inline std::uint64_t per_image_macs_at_epoch(const ViTConfig& cfg, const SparsityConfig& sparsity,
                                             std::size_t epoch) {
  return detail::per_image_cost(cfg, &sparsity, effective_token_ratio(sparsity, epoch)).total_per_image;
}

/// Active-subset size the example filter keeps constant.
inline std::size_t active_subset_size(std::size_t dataset_size, double r_e) {
  return static_cast<std::size_t>(std::llround(r_e * static_cast<double>(dataset_size)));
}

/// Adds whole-run totals: every epoch visits |active| examples at that epoch's R_T.
inline CostReport with_training(CostReport rep, const ViTConfig& cfg, const SparsityConfig& sparsity,
                                std::size_t epochs, std::size_t dataset_size) {
  rep.epochs = epochs;
  rep.dataset_size = dataset_size;
  rep.active_size = active_subset_size(dataset_size, sparsity.r_e);
  rep.training_total = 0;
  for (std::size_t e = 0; e < epochs; ++e)
    rep.training_total += per_image_macs_at_epoch(cfg, sparsity, e) * rep.active_size;
  rep.dense_training_total = rep.dense_per_image * dataset_size * epochs;
  rep.training_saving_vs_dense = detail::saving(rep.training_total, rep.dense_training_total);
  return rep;
}

/// Runs one forward pass with counting enabled and reports what the kernels charged.
template <typename T>
CostReport instrumented_count(const ViT<T>& model, std::span<const T> image, const SparsityConfig* sparsity = nullptr,
                              std::size_t epoch = 0) {
  MacCounter counter;
  {
    NoGradGuard no_grad;
    CountingScope scope(counter);
    (void)model.forward_image(image, sparsity, epoch);
  }
  if (counter.untracked_macs != 0)
    throw AccountingError("kernels charged " + std::to_string(counter.untracked_macs) + " untagged MACs", 0);
  CostReport rep;
  rep.per_layer = counter.per_layer;
  rep.embed_macs = counter.embed_macs;
  rep.head_macs = counter.head_macs;
  rep.total_per_image = rep.component_sum();
  rep.dense_per_image = detail::per_image_cost(model.config(), nullptr, 1.0).total_per_image;
  rep.saving_vs_dense = detail::saving(rep.total_per_image, rep.dense_per_image);
  return rep;
}

/// Throws AccountingError naming the first layer where the two reports differ.
inline void require_equal_costs(const CostReport& analytic, const CostReport& instrumented) {
  if (analytic.embed_macs != instrumented.embed_macs)
    throw AccountingError("embed MACs differ: analytic " + std::to_string(analytic.embed_macs) + " vs counted " +
                              std::to_string(instrumented.embed_macs),
                          0);
  const std::size_t n = std::max(analytic.per_layer.size(), instrumented.per_layer.size());
  for (std::size_t i = 0; i < n; ++i) {
    LayerCost a = i < analytic.per_layer.size() ? analytic.per_layer[i] : LayerCost{i + 1};
    LayerCost b = i < instrumented.per_layer.size() ? instrumented.per_layer[i] : LayerCost{i + 1};
    if (!(a == b))
      throw AccountingError("layer " + std::to_string(i + 1) + " MACs differ: analytic " + std::to_string(a.total()) +
                                " vs counted " + std::to_string(b.total()),
                            i + 1);
  }
  if (analytic.head_macs != instrumented.head_macs)
    throw AccountingError("head MACs differ: analytic " + std::to_string(analytic.head_macs) + " vs counted " +
                              std::to_string(instrumented.head_macs),
                          n + 1);
}

inline std::string format_report_text(const CostReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(8) << "layer" << std::right << std::setw(14) << "qkv" << std::setw(14) << "attn_logit"
     << std::setw(14) << "attn_value" << std::setw(14) << "proj" << std::setw(14) << "ffn" << std::setw(16) << "total"
     << '\n';
  os << std::left << std::setw(8) << "embed" << std::right << std::setw(84) << r.embed_macs << '\n';
  for (const auto& l : r.per_layer)
    os << std::left << std::setw(8) << l.layer << std::right << std::setw(14) << l.qkv_macs << std::setw(14)
       << l.attn_logit_macs << std::setw(14) << l.attn_value_macs << std::setw(14) << l.proj_macs << std::setw(14)
       << l.ffn_macs << std::setw(16) << l.total() << '\n';
  os << std::left << std::setw(8) << "head" << std::right << std::setw(84) << r.head_macs << '\n';
  os << std::left << std::setw(24) << "total_per_image" << r.total_per_image << '\n';
  os << std::left << std::setw(24) << "dense_per_image" << r.dense_per_image << '\n';
  os << std::left << std::setw(24) << "saving_vs_dense" << std::fixed << std::setprecision(4) << r.saving_vs_dense
     << '\n';
  if (r.epochs > 0) {
    os << std::left << std::setw(24) << "training_total" << r.training_total << '\n';
    os << std::left << std::setw(24) << "dense_training_total" << r.dense_training_total << '\n';
    os << std::left << std::setw(24) << "training_saving" << std::fixed << std::setprecision(4)
       << r.training_saving_vs_dense << '\n';
  }
  return os.str();
}

}  // namespace trilevel

#endif  // TRILEVEL_MACS_HPP
