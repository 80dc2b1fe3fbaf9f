#ifndef TRILEVEL_CONFIG_HPP
#define TRILEVEL_CONFIG_HPP

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "trilevel/errors.hpp"
#include "trilevel/macs.hpp"
#include "trilevel/selector.hpp"
#include "trilevel/vit.hpp"

namespace trilevel {

enum class DatasetKind { mnist, cifar10, synthetic };
enum class Precision { f32, f64 };

/// Everything a training run needs. Defaults are the desk-scale CIFAR-10 recipe.
struct RunConfig {
  ViTConfig model;
  SparsityConfig sparsity = [] {
    SparsityConfig s;
    s.prune_layers = {2, 4, 6};
    s.rt_warmup_epochs = 10;
    s.update_period_epochs = 10;
    return s;
  }();
  std::size_t epochs = 60;
  std::size_t batch_size = 128;
  double base_lr = 5e-4;
  double weight_decay = 0.05;
  std::size_t lr_warmup_epochs = 5;
  std::uint64_t seed = 0;
  DatasetKind dataset = DatasetKind::cifar10;
  std::string data_dir = "data/cifar-10-batches-bin";
  std::string out_dir = "runs/default";
  Precision precision = Precision::f32;

  void validate() const {
    model.validate();
    sparsity.validate(model.depth);
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(base_lr > 0)) throw ConfigError("base_lr must be positive");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
  }
};

inline std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::mnist: return "mnist";
    case DatasetKind::cifar10: return "cifar10";
    case DatasetKind::synthetic: return "synthetic";
  }
  return "?";
}

inline DatasetKind parse_dataset_kind(const std::string& s) {
  if (s == "mnist") return DatasetKind::mnist;
  if (s == "cifar10") return DatasetKind::cifar10;
  if (s == "synthetic") return DatasetKind::synthetic;
  throw ConfigError("unknown dataset '" + s + "' (expected mnist, cifar10 or synthetic)");
}

inline std::string to_string(TiebreakDirection d) {
  return d == TiebreakDirection::low_variance_first ? "low_variance_first" : "high_variance_first";
}

inline TiebreakDirection parse_tiebreak(const std::string& s) {
  if (s == "low_variance_first") return TiebreakDirection::low_variance_first;
  if (s == "high_variance_first") return TiebreakDirection::high_variance_first;
  throw ConfigError("unknown tiebreak_direction '" + s + "'");
}

namespace detail {

using nlohmann::json;

inline void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json to_json(const ViTConfig& m) {
  return {{"image_size", m.image_size}, {"patch_size", m.patch_size}, {"channels", m.channels},
          {"depth", m.depth},           {"d_model", m.d_model},       {"heads", m.heads},
          {"mlp_ratio", m.mlp_ratio},   {"num_classes", m.num_classes}, {"use_cls_token", m.use_cls_token}};
}

inline nlohmann::json to_json(const SparsityConfig& s) {
  return {{"r_e", s.r_e},
          {"r_t", s.r_t},
          {"r_a", s.r_a},
          {"prune_layers", s.prune_layers},
          {"rt_warmup_epochs", s.rt_warmup_epochs},
          {"update_period_epochs", s.update_period_epochs},
          {"removal_step_pct", s.removal_step_pct},
          {"initial_removal_pct", s.initial_removal_pct},
          {"variance_layer", s.variance_layer},
          {"tiebreak_direction", to_string(s.tiebreak_direction)}};
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"model", to_json(c.model)},
          {"sparsity", to_json(c.sparsity)},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"base_lr", c.base_lr},
          {"weight_decay", c.weight_decay},
          {"lr_warmup_epochs", c.lr_warmup_epochs},
          {"seed", c.seed},
          {"dataset", to_string(c.dataset)},
          {"data_dir", c.data_dir},
          {"out_dir", c.out_dir},
          {"precision", c.precision == Precision::f32 ? "f32" : "f64"}};
}

inline ViTConfig vit_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"image_size", "patch_size", "channels", "depth", "d_model", "heads", "mlp_ratio",
                             "num_classes", "use_cls_token"},
                         "model");
  ViTConfig m;
  detail::read(j, "image_size", m.image_size, "model");
  detail::read(j, "patch_size", m.patch_size, "model");
  detail::read(j, "channels", m.channels, "model");
  detail::read(j, "depth", m.depth, "model");
  detail::read(j, "d_model", m.d_model, "model");
  detail::read(j, "heads", m.heads, "model");
  detail::read(j, "mlp_ratio", m.mlp_ratio, "model");
  detail::read(j, "num_classes", m.num_classes, "model");
  detail::read(j, "use_cls_token", m.use_cls_token, "model");
  return m;
}

/// Keys missing from `j` keep the values in `base`. When r_e is given without
/// initial_removal_pct, the latter is derived from it.
inline SparsityConfig sparsity_config_from_json(const nlohmann::json& j, SparsityConfig base = {}) {
  detail::reject_unknown(j, {"r_e", "r_t", "r_a", "prune_layers", "rt_warmup_epochs", "update_period_epochs",
                             "removal_step_pct", "initial_removal_pct", "variance_layer", "tiebreak_direction"},
                         "sparsity");
  SparsityConfig s = base;
  detail::read(j, "r_e", s.r_e, "sparsity");
  detail::read(j, "r_t", s.r_t, "sparsity");
  detail::read(j, "r_a", s.r_a, "sparsity");
  detail::read(j, "prune_layers", s.prune_layers, "sparsity");
  detail::read(j, "rt_warmup_epochs", s.rt_warmup_epochs, "sparsity");
  detail::read(j, "update_period_epochs", s.update_period_epochs, "sparsity");
  detail::read(j, "removal_step_pct", s.removal_step_pct, "sparsity");
  s.initial_removal_pct = (1.0 - s.r_e) * 100.0;
  detail::read(j, "initial_removal_pct", s.initial_removal_pct, "sparsity");
  detail::read(j, "variance_layer", s.variance_layer, "sparsity");
  if (j.contains("tiebreak_direction")) {
    std::string t;
    detail::read(j, "tiebreak_direction", t, "sparsity");
    s.tiebreak_direction = parse_tiebreak(t);
  }
  return s;
}

/// Parses and validates a run config; unknown keys at any level are errors.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"model", "sparsity", "epochs", "batch_size", "base_lr", "weight_decay",
                             "lr_warmup_epochs", "seed", "dataset", "data_dir", "out_dir", "precision"},
                         "config");
  RunConfig c;
  if (j.contains("model")) c.model = vit_config_from_json(j.at("model"));
  if (j.contains("sparsity")) c.sparsity = sparsity_config_from_json(j.at("sparsity"), c.sparsity);
  detail::read(j, "epochs", c.epochs, "config");
  detail::read(j, "batch_size", c.batch_size, "config");
  detail::read(j, "base_lr", c.base_lr, "config");
  detail::read(j, "weight_decay", c.weight_decay, "config");
  detail::read(j, "lr_warmup_epochs", c.lr_warmup_epochs, "config");
  detail::read(j, "seed", c.seed, "config");
  if (j.contains("dataset")) {
    std::string k;
    detail::read(j, "dataset", k, "config");
    c.dataset = parse_dataset_kind(k);
  }
  detail::read(j, "data_dir", c.data_dir, "config");
  detail::read(j, "out_dir", c.out_dir, "config");
  if (j.contains("precision")) {
    std::string p;
    detail::read(j, "precision", p, "config");
    if (p == "f32")
      c.precision = Precision::f32;
    else if (p == "f64")
      c.precision = Precision::f64;
    else
      throw ConfigError("precision must be f32 or f64, got '" + p + "'");
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

/// Synthetic sizes travel in data_dir as "train=N,test=M"; empty means 2000/500.
struct SyntheticSizes {
  std::size_t train = 2000;
  std::size_t test = 500;
};

inline SyntheticSizes parse_synthetic_sizes(const std::string& sizes) {
  SyntheticSizes s;
  std::stringstream ss(sizes);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("synthetic data_dir item '" + item + "' is not key=value");
    const std::string key = item.substr(0, eq);
    std::size_t value = 0;
    try {
      value = std::stoul(item.substr(eq + 1));
    } catch (...) {
      throw ConfigError("synthetic data_dir item '" + item + "' has a bad count");
    }
    if (key == "train")
      s.train = value;
    else if (key == "test")
      s.test = value;
    else
      throw ConfigError("unknown synthetic data_dir key '" + key + "'");
  }
  return s;
}

inline nlohmann::json to_json(const CostReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : r.per_layer)
    layers.push_back({{"layer", l.layer},
                      {"qkv_macs", l.qkv_macs},
                      {"attn_logit_macs", l.attn_logit_macs},
                      {"attn_value_macs", l.attn_value_macs},
                      {"proj_macs", l.proj_macs},
                      {"ffn_macs", l.ffn_macs}});
  nlohmann::json j = {{"per_layer", layers},
                      {"embed_macs", r.embed_macs},
                      {"head_macs", r.head_macs},
                      {"total_per_image", r.total_per_image},
                      {"dense_per_image", r.dense_per_image},
                      {"saving_vs_dense", r.saving_vs_dense}};
  if (r.epochs > 0)
    j["training"] = {{"epochs", r.epochs},
                     {"dataset_size", r.dataset_size},
                     {"active_size", r.active_size},
                     {"training_total", r.training_total},
                     {"dense_training_total", r.dense_training_total},
                     {"saving_vs_dense", r.training_saving_vs_dense}};
  return j;
}

}  // namespace trilevel

#endif  // TRILEVEL_CONFIG_HPP
