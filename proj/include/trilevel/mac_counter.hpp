#ifndef TRILEVEL_MAC_COUNTER_HPP
#define TRILEVEL_MAC_COUNTER_HPP

#include <cstddef>
#include <cstdint>
#include <vector>

namespace trilevel {

enum class CostComponent { embed, qkv, attn_logit, attn_value, proj, ffn, head, untracked };

struct LayerCost {
  std::size_t layer = 0;  // 1-based encoder layer
  std::uint64_t qkv_macs = 0;
  std::uint64_t attn_logit_macs = 0;
  std::uint64_t attn_value_macs = 0;
  std::uint64_t proj_macs = 0;
  std::uint64_t ffn_macs = 0;

  std::uint64_t total() const { return qkv_macs + attn_logit_macs + attn_value_macs + proj_macs + ffn_macs; }
  friend bool operator==(const LayerCost&, const LayerCost&) = default;
};

/// Accumulates forward-pass MACs reported by the kernels while a CountingScope is live.
struct MacCounter {
  std::vector<LayerCost> per_layer;
  std::uint64_t embed_macs = 0;
  std::uint64_t head_macs = 0;
  std::uint64_t untracked_macs = 0;

  void add(std::size_t layer, CostComponent c, std::uint64_t macs) {
    switch (c) {
      case CostComponent::embed: embed_macs += macs; return;
      case CostComponent::head: head_macs += macs; return;
      case CostComponent::untracked: untracked_macs += macs; return;
      default: break;
    }
    if (layer == 0) {
      untracked_macs += macs;
      return;
    }
    if (per_layer.size() < layer) {
      std::size_t old = per_layer.size();
      per_layer.resize(layer);
      for (std::size_t i = old; i < layer; ++i) per_layer[i].layer = i + 1;
    }
    LayerCost& lc = per_layer[layer - 1];
    switch (c) {
      case CostComponent::qkv: lc.qkv_macs += macs; break;
      case CostComponent::attn_logit: lc.attn_logit_macs += macs; break;
      case CostComponent::attn_value: lc.attn_value_macs += macs; break;
      case CostComponent::proj: lc.proj_macs += macs; break;
      case CostComponent::ffn: lc.ffn_macs += macs; break;
      default: break;
    }
  }
};

namespace detail {
struct CounterState {
  MacCounter* active = nullptr;
  std::size_t layer = 0;
  CostComponent component = CostComponent::untracked;
};
inline CounterState& counter_state() {
  thread_local CounterState state;
  return state;
}
}  // namespace detail

/// Called by kernels; a no-op unless counting is enabled on this thread.
inline void charge_macs(std::uint64_t macs) {
  auto& s = detail::counter_state();
  if (s.active) s.active->add(s.layer, s.component, macs);
}

class CountingScope {
 public:
  explicit CountingScope(MacCounter& counter) : prev_(detail::counter_state().active) {
    detail::counter_state().active = &counter;
  }
  ~CountingScope() { detail::counter_state().active = prev_; }
  CountingScope(const CountingScope&) = delete;
  CountingScope& operator=(const CountingScope&) = delete;

 private:
  MacCounter* prev_;
};

/// Tags kernels run inside it with a layer and component.
class CostTag {
 public:
  CostTag(std::size_t layer, CostComponent component) {
    auto& s = detail::counter_state();
    prev_layer_ = s.layer;
    prev_component_ = s.component;
    s.layer = layer;
    s.component = component;
  }
  ~CostTag() {
    auto& s = detail::counter_state();
    s.layer = prev_layer_;
    s.component = prev_component_;
  }
  CostTag(const CostTag&) = delete;
  CostTag& operator=(const CostTag&) = delete;

 private:
  std::size_t prev_layer_;
  CostComponent prev_component_;
};

}  // namespace trilevel

#endif  // TRILEVEL_MAC_COUNTER_HPP
