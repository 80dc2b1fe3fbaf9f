#ifndef TRILEVEL_VIT_HPP
#define TRILEVEL_VIT_HPP

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "trilevel/attention_record.hpp"
#include "trilevel/errors.hpp"
#include "trilevel/mac_counter.hpp"
#include "trilevel/ops.hpp"
#include "trilevel/optim.hpp"
#include "trilevel/selector.hpp"
#include "trilevel/tensor.hpp"

namespace trilevel {

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t channels = 3;
  std::size_t depth = 6;
  std::size_t d_model = 128;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 10;
  bool use_cls_token = true;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t patches() const { return grid() * grid(); }
  std::size_t tokens() const { return patches() + (use_cls_token ? 1 : 0); }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t head_dim() const { return d_model / heads; }
  std::size_t hidden() const { return d_model * mlp_ratio; }
  std::size_t image_numel() const { return channels * image_size * image_size; }

  void validate() const {
    if (image_size == 0 || patch_size == 0 || channels == 0 || depth == 0 || d_model == 0 || heads == 0 ||
        mlp_ratio == 0 || num_classes == 0)
      throw ConfigError("ViT config fields must all be positive");
    if (image_size % patch_size != 0)
      throw ConfigError("image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                        std::to_string(patch_size));
    if (d_model % heads != 0)
      throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by heads " + std::to_string(heads));
  }

  friend bool operator==(const ViTConfig&, const ViTConfig&) = default;
};

template <typename T>
struct EncoderWeights {
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> qkv_weight, qkv_bias;  // [d x 3d], [3d]; columns are Q | K | V, heads contiguous
  Tensor<T> proj_weight, proj_bias;
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> fc1_weight, fc1_bias;  // [d x hidden]
  Tensor<T> fc2_weight, fc2_bias;  // [hidden x d]
};

/// Builds a mask over the current live tokens from a selection's key sets.
inline KeyMaskPtr build_key_mask(const SelectionMask& sel, const std::vector<std::size_t>& live_tokens) {
  std::unordered_map<std::size_t, std::size_t> pos;
  for (std::size_t i = 0; i < live_tokens.size(); ++i) pos[live_tokens[i]] = i;
  if (sel.kept_keys.size() != live_tokens.size())
    throw SelectorContractError("selection covers " + std::to_string(sel.kept_keys.size()) + " queries but " +
                                std::to_string(live_tokens.size()) + " tokens are live");
  std::vector<std::vector<std::size_t>> sets(live_tokens.size());
  for (std::size_t q = 0; q < live_tokens.size(); ++q) {
    if (sel.kept_tokens.at(q) != live_tokens[q])
      throw SelectorContractError("selection query " + std::to_string(sel.kept_tokens[q]) + " is not live token " +
                                  std::to_string(live_tokens[q]));
    for (std::size_t key : sel.kept_keys[q]) {
      auto it = pos.find(key);
      if (it == pos.end())
        throw SelectorContractError("selection keeps key " + std::to_string(key) + " which is not a live token");
      sets[q].push_back(it->second);
    }
  }
  return std::make_shared<const KeyMask>(KeyMask::from_sets(live_tokens.size(), live_tokens.size(), sets));
}

template <typename T>
struct AttentionOutput {
  Tensor<T> out;
  AttentionRecord<T> record;
};

/// Multi-head self-attention over x [L' x d]. With a mask, logits and attn*V are
/// evaluated only on kept (query, key) pairs and each row is renormalized over them.
template <typename T>
AttentionOutput<T> mhsa_forward(const Tensor<T>& x, const EncoderWeights<T>& w, std::size_t heads,
                                const KeyMaskPtr& mask, std::size_t layer = 0) {
  const std::size_t tokens = x.dim(0), d = x.dim(1), dh = d / heads;
  if (mask && (mask->rows() != tokens || mask->cols() != tokens))
    throw SelectorContractError("attention mask " + shape_str({mask->rows(), mask->cols()}) + " does not match " +
                                std::to_string(tokens) + " live tokens");
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  AttentionOutput<T> res;
  res.record.layer = layer;
  res.record.heads = heads;
  res.record.tokens = tokens;
  res.record.probs.reserve(heads * tokens * tokens);

  Tensor<T> qkv;
  {
    CostTag tag(layer, CostComponent::qkv);
    qkv = ops::add_row(ops::matmul(x, w.qkv_weight), w.qkv_bias);
  }
  std::vector<Tensor<T>> head_out;
  head_out.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    auto q = ops::slice_cols(qkv, h * dh, dh);
    auto k = ops::slice_cols(qkv, d + h * dh, dh);
    auto v = ops::slice_cols(qkv, 2 * d + h * dh, dh);
    Tensor<T> logits;
    {
      CostTag tag(layer, CostComponent::attn_logit);
      logits = mask ? ops::masked_matmul_nt(q, k, mask, scale) : ops::matmul_nt(q, k, scale);
    }
    auto probs = ops::softmax_rows(logits, mask);
    res.record.probs.insert(res.record.probs.end(), probs.data().begin(), probs.data().end());
    CostTag tag(layer, CostComponent::attn_value);
    head_out.push_back(mask ? ops::masked_matmul(probs, v, mask) : ops::matmul(probs, v));
  }
  auto merged = heads == 1 ? head_out.front() : ops::concat_cols(head_out);
  CostTag tag(layer, CostComponent::proj);
  res.out = ops::add_row(ops::matmul(merged, w.proj_weight), w.proj_bias);
  return res;
}

/// Pre-norm encoder block: x + MHSA(LN(x)), then + FFN(LN(.)).
template <typename T>
AttentionOutput<T> encoder_layer(const Tensor<T>& x, const EncoderWeights<T>& w, std::size_t heads,
                                 const KeyMaskPtr& mask, std::size_t layer = 0, T ln_eps = T(1e-6)) {
  auto attn = mhsa_forward(ops::layernorm(x, w.ln1_gamma, w.ln1_beta, ln_eps), w, heads, mask, layer);
  auto h = ops::add(x, attn.out);
  Tensor<T> ffn;
  {
    CostTag tag(layer, CostComponent::ffn);
    auto z = ops::layernorm(h, w.ln2_gamma, w.ln2_beta, ln_eps);
    auto a = ops::gelu(ops::add_row(ops::matmul(z, w.fc1_weight), w.fc1_bias));
    ffn = ops::add_row(ops::matmul(a, w.fc2_weight), w.fc2_bias);
  }
  attn.out = ops::add(h, ffn);
  return attn;
}

/// Optional inputs and outputs of a forward pass beyond the logits.
template <typename T>
struct ForwardTrace {
  bool keep_all_records = true;
  std::size_t stat_layer = 0;  // kept even when keep_all_records is false
  std::vector<AttentionRecord<T>> records;
  std::vector<SelectionMask> selections;
  std::vector<std::size_t> live_tokens_per_layer;

  const AttentionRecord<T>* record_for(std::size_t layer) const {
    for (const auto& r : records)
      if (r.layer == layer) return &r;
    return nullptr;
  }
};

template <typename T>
class ViT {
 public:
  ViT() = default;

  ViT(const ViTConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto trunc_normal = [&](Shape shape, double std) {
      std::vector<T> v(shape_numel(shape));
      for (auto& x : v) {
        double z;
        do z = normal(rng);
        while (std::abs(z) > 2.0);
        x = static_cast<T>(z * std);
      }
      return Tensor<T>(std::move(shape), std::move(v), true);
    };
    auto zeros = [](Shape s) { return Tensor<T>::zeros(std::move(s), true); };
    auto ones = [](Shape s) { return Tensor<T>::full(std::move(s), T(1), true); };
    const std::size_t d = cfg_.d_model, hid = cfg_.hidden();
    patch_weight_ = trunc_normal({cfg_.patch_dim(), d}, 0.02);
    patch_bias_ = zeros({d});
    if (cfg_.use_cls_token) cls_token_ = trunc_normal({1, d}, 0.02);
    pos_embed_ = trunc_normal({cfg_.tokens(), d}, 0.02);
    layers_.resize(cfg_.depth);
    for (auto& l : layers_) {
      l.ln1_gamma = ones({d});
      l.ln1_beta = zeros({d});
      l.qkv_weight = trunc_normal({d, 3 * d}, 0.02);
      l.qkv_bias = zeros({3 * d});
      l.proj_weight = trunc_normal({d, d}, 0.02);
      l.proj_bias = zeros({d});
      l.ln2_gamma = ones({d});
      l.ln2_beta = zeros({d});
      l.fc1_weight = trunc_normal({d, hid}, 0.02);
      l.fc1_bias = zeros({hid});
      l.fc2_weight = trunc_normal({hid, d}, 0.02);
      l.fc2_bias = zeros({d});
    }
    norm_gamma_ = ones({d});
    norm_beta_ = zeros({d});
    head_weight_ = trunc_normal({d, cfg_.num_classes}, 0.02);
    head_bias_ = zeros({cfg_.num_classes});
  }

  const ViTConfig& config() const { return cfg_; }
  const std::vector<EncoderWeights<T>>& layers() const { return layers_; }

  /// Every trainable tensor with a stable name; order is fixed for a given config.
  std::vector<NamedParam<T>> parameters() const {
    std::vector<NamedParam<T>> out{{"patch.weight", patch_weight_}, {"patch.bias", patch_bias_}};
    if (cfg_.use_cls_token) out.push_back({"cls_token", cls_token_});
    out.push_back({"pos_embed", pos_embed_});
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      const std::string p = "blocks." + std::to_string(i) + ".";
      out.push_back({p + "ln1.gamma", l.ln1_gamma});
      out.push_back({p + "ln1.beta", l.ln1_beta});
      out.push_back({p + "qkv.weight", l.qkv_weight});
      out.push_back({p + "qkv.bias", l.qkv_bias});
      out.push_back({p + "proj.weight", l.proj_weight});
      out.push_back({p + "proj.bias", l.proj_bias});
      out.push_back({p + "ln2.gamma", l.ln2_gamma});
      out.push_back({p + "ln2.beta", l.ln2_beta});
      out.push_back({p + "fc1.weight", l.fc1_weight});
      out.push_back({p + "fc1.bias", l.fc1_bias});
      out.push_back({p + "fc2.weight", l.fc2_weight});
      out.push_back({p + "fc2.bias", l.fc2_bias});
    }
    out.push_back({"norm.gamma", norm_gamma_});
    out.push_back({"norm.beta", norm_beta_});
    out.push_back({"head.weight", head_weight_});
    out.push_back({"head.bias", head_bias_});
    return out;
  }

  /// Flattened patches [N x C*p*p] of a C x H x W image, patches in raster order.
  Tensor<T> patchify(std::span<const T> image) const {
    if (image.size() != cfg_.image_numel())
      throw ConfigError("image has " + std::to_string(image.size()) + " values, config expects " +
                        std::to_string(cfg_.image_numel()));
    const std::size_t g = cfg_.grid(), p = cfg_.patch_size, s = cfg_.image_size, c = cfg_.channels;
    std::vector<T> out(cfg_.patches() * cfg_.patch_dim());
    std::size_t o = 0;
    for (std::size_t gy = 0; gy < g; ++gy)
      for (std::size_t gx = 0; gx < g; ++gx)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x) out[o++] = image[(ch * s + gy * p + y) * s + gx * p + x];
    return Tensor<T>({cfg_.patches(), cfg_.patch_dim()}, std::move(out));
  }

  /// Token embeddings [L x d]: projected patches, [CLS] prepended, positions added.
  Tensor<T> patch_embed(std::span<const T> image) const {
    Tensor<T> emb;
    {
      CostTag tag(0, CostComponent::embed);
      emb = ops::add_row(ops::matmul(patchify(image), patch_weight_), patch_bias_);
    }
    if (cfg_.use_cls_token) emb = ops::concat_rows<T>({cls_token_, emb});
    return ops::add(emb, pos_embed_);
  }

  /// Logits [1 x num_classes] for one image. Before each configured layer the selector
  /// runs on the previous layer's attention map; the layer feeding a selector always
  /// computes dense attention over its live tokens.
  Tensor<T> forward_image(std::span<const T> image, const SparsityConfig* sparsity = nullptr, std::size_t epoch = 0,
                          ForwardTrace<T>* trace = nullptr) const {
    Tensor<T> x = patch_embed(image);
    std::vector<std::size_t> live(cfg_.tokens());
    for (std::size_t i = 0; i < live.size(); ++i) live[i] = i;
    const bool selecting = sparsity && sparsity->has_selectors();
    KeyMaskPtr stage_mask;
    AttentionRecord<T> prev;
    for (std::size_t layer = 1; layer <= cfg_.depth; ++layer) {
      if (selecting && sparsity->prunes_before(layer)) {
        SelectionMask sel = ta_select(prev, *sparsity, epoch);
        std::unordered_map<std::size_t, std::size_t> pos;
        for (std::size_t i = 0; i < live.size(); ++i) pos[live[i]] = i;
        std::vector<std::size_t> rows;
        rows.reserve(sel.kept_tokens.size());
        for (std::size_t t : sel.kept_tokens) rows.push_back(pos.at(t));
        x = ops::gather_rows(x, std::move(rows));
        live = sel.kept_tokens;
        stage_mask = sparsity->r_a < 1.0 ? build_key_mask(sel, live) : nullptr;
        if (trace) trace->selections.push_back(std::move(sel));
      }
      const bool feeds_selector = selecting && sparsity->prunes_before(layer + 1);
      auto res = encoder_layer(x, layers_[layer - 1], cfg_.heads, feeds_selector ? nullptr : stage_mask, layer);
      x = res.out;
      res.record.live_tokens = live;
      res.record.has_cls = cfg_.use_cls_token;
      if (trace) {
        trace->live_tokens_per_layer.push_back(live.size());
        if (trace->keep_all_records || trace->stat_layer == layer) trace->records.push_back(res.record);
      }
      if (feeds_selector) prev = std::move(res.record);
    }
    x = ops::layernorm(x, norm_gamma_, norm_beta_, T(1e-6));
    auto pooled = cfg_.use_cls_token ? ops::gather_rows(x, {0}) : ops::mean_rows(x);
    CostTag tag(cfg_.depth + 1, CostComponent::head);
    return ops::add_row(ops::matmul(pooled, head_weight_), head_bias_);
  }

  /// Logits [B x num_classes]; `traces`, when given, receives one trace per image.
  Tensor<T> forward(const std::vector<std::span<const T>>& images, const SparsityConfig* sparsity = nullptr,
                    std::size_t epoch = 0, std::vector<ForwardTrace<T>>* traces = nullptr) const {
    if (traces && traces->size() < images.size())
      throw DimensionError("forward got " + std::to_string(traces->size()) + " traces for " +
                           std::to_string(images.size()) + " images");
    std::vector<Tensor<T>> rows;
    rows.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i)
      rows.push_back(forward_image(images[i], sparsity, epoch, traces ? &(*traces)[i] : nullptr));
    return rows.size() == 1 ? rows.front() : ops::concat_rows(rows);
  }

 private:
  ViTConfig cfg_;
  Tensor<T> patch_weight_, patch_bias_, cls_token_, pos_embed_;
  std::vector<EncoderWeights<T>> layers_;
  Tensor<T> norm_gamma_, norm_beta_, head_weight_, head_bias_;
};

}  // namespace trilevel

#endif  // TRILEVEL_VIT_HPP
