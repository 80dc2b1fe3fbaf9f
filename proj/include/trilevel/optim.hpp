#ifndef TRILEVEL_OPTIM_HPP
#define TRILEVEL_OPTIM_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "trilevel/errors.hpp"
#include "trilevel/tensor.hpp"

namespace trilevel {

/// Cosine interpolation from `start` (t = 0) to `end` (t >= total).
inline double cosine_schedule(double t, double total, double start, double end) {
  if (total <= 0) return end;
  double progress = std::clamp(t, 0.0, total) / total;
  return end + (start - end) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Linear warm-up over `warmup_epochs`, then cosine decay to `min_lr` at `total_epochs`.
inline double learning_rate_at(std::size_t epoch, std::size_t total_epochs, std::size_t warmup_epochs, double base_lr,
                               double min_lr = 1e-5) {
  if (epoch < warmup_epochs) return base_lr * static_cast<double>(epoch + 1) / static_cast<double>(warmup_epochs);
  std::size_t decay = total_epochs > warmup_epochs ? total_epochs - warmup_epochs : 1;
  return cosine_schedule(static_cast<double>(epoch - warmup_epochs), static_cast<double>(decay), base_lr, min_lr);
}

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> value;
};

struct AdamWOptions {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// AdamW with decoupled weight decay and bias-corrected moments.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<NamedParam<T>> params, AdamWOptions opts) : params_(std::move(params)), opts_(opts) {
    if (!(opts_.lr >= 0)) throw ConfigError("AdamW lr must be non-negative");
    if (!(opts_.beta1 > 0 && opts_.beta1 < 1 && opts_.beta2 > 0 && opts_.beta2 < 1))
      throw ConfigError("AdamW betas must lie in (0,1)");
    if (!(opts_.eps > 0)) throw ConfigError("AdamW eps must be positive");
    if (!(opts_.weight_decay >= 0)) throw ConfigError("AdamW weight_decay must be non-negative");
    for (auto& p : params_) {
      m_.emplace_back(p.value.numel(), T(0));
      v_.emplace_back(p.value.numel(), T(0));
    }
  }

  void set_lr(double lr) { opts_.lr = lr; }
  double lr() const { return opts_.lr; }
  std::size_t step_count() const { return step_; }
  const std::vector<NamedParam<T>>& params() const { return params_; }
  const std::vector<T>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<T>& second_moment(std::size_t i) const { return v_[i]; }

  /// Applies one update, then clears every grad.
  void step() {
    for (auto& p : params_)
      if (!p.value.has_grad()) throw UnpopulatedGradientError("parameter '" + p.name + "' has no gradient");
    ++step_;
    const T lr = static_cast<T>(opts_.lr);
    const T b1 = static_cast<T>(opts_.beta1), b2 = static_cast<T>(opts_.beta2);
    const T bc1 = static_cast<T>(1.0 - std::pow(opts_.beta1, static_cast<double>(step_)));
    const T bc2 = static_cast<T>(1.0 - std::pow(opts_.beta2, static_cast<double>(step_)));
    const T eps = static_cast<T>(opts_.eps), wd = static_cast<T>(opts_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto data = params_[i].value.mutable_data();
      auto grad = params_[i].value.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < data.size(); ++j) {
        T g = grad[j];
        m[j] = b1 * m[j] + (T(1) - b1) * g;
        v[j] = b2 * v[j] + (T(1) - b2) * g * g;
        T mhat = m[j] / bc1;
        T vhat = v[j] / bc2;
        data[j] -= lr * (wd * data[j] + mhat / (std::sqrt(vhat) + eps));
      }
      params_[i].value.zero_grad();
    }
  }

 private:
  std::vector<NamedParam<T>> params_;
  AdamWOptions opts_;
  std::vector<std::vector<T>> m_, v_;
  std::size_t step_ = 0;
};

}  // namespace trilevel

#endif  // TRILEVEL_OPTIM_HPP
