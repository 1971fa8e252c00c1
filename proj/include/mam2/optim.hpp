#pragma once
// AdamW with decoupled weight decay, plus the warmup-cosine learning
// rate schedule used by the pre-training loop.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mam2/blocks.hpp"
#include "mam2/common.hpp"
#include "mam2/tensor.hpp"

namespace mam2 {

// Peak learning rate scales linearly with batch size against a base of 256.
// Ramps linearly from zero over warmup_steps, then follows a half cosine
// down to zero at total_steps.
inline double lr_at(int64_t step, int64_t total_steps, int64_t warmup_steps,
                    double base_lr, int64_t batch_size) {
  if (total_steps < 1) throw UsageError("lr_at: total_steps must be positive");
  if (warmup_steps < 0 || warmup_steps > total_steps)
    throw UsageError("lr_at: warmup_steps must lie in [0, total_steps]");
  if (step < 0) throw UsageError("lr_at: negative step");
  if (batch_size < 1) throw UsageError("lr_at: batch_size must be positive");
  const double peak = base_lr * static_cast<double>(batch_size) / 256.0;
  if (step < warmup_steps)
    return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const int64_t span = total_steps - warmup_steps;
  double progress = span > 0
      ? static_cast<double>(step - warmup_steps) / static_cast<double>(span)
      : 1.0;
  if (progress > 1.0) progress = 1.0;
  return peak * 0.5 * (1.0 + std::cos(progress * 3.14159265358979323846));
}

template <typename S>
struct AdamWConfig {
  S beta1 = S(0.9);
  S beta2 = S(0.95);
  S eps = S(1e-8);
  S weight_decay = S(0.05);
};

// Holds first/second moment estimates per parameter, in the order the
// parameter list was handed in. Parameters are updated in place through
// their shared storage.
template <typename S>
class AdamW {
 public:
  explicit AdamW(NamedParams<S> params, AdamWConfig<S> cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    if (params_.empty()) throw UsageError("AdamW: empty parameter list");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto& [name, p] : params_) {
      (void)name;
      m_.push_back(std::vector<S>(p.numel(), S(0)));
      v_.push_back(std::vector<S>(p.numel(), S(0)));
    }
  }

  const NamedParams<S>& params() const { return params_; }
  int64_t steps_done() const { return t_; }
  const std::vector<std::vector<S>>& moments1() const { return m_; }
  const std::vector<std::vector<S>>& moments2() const { return v_; }

  void restore(std::vector<std::vector<S>> m, std::vector<std::vector<S>> v,
               int64_t steps) {
    if (m.size() != params_.size() || v.size() != params_.size())
      throw UsageError("AdamW::restore: moment count does not match parameters");
    for (size_t i = 0; i < params_.size(); ++i)
      if (m[i].size() != size_t(params_[i].second.numel()) ||
          v[i].size() != size_t(params_[i].second.numel()))
        throw UsageError("AdamW::restore: moment size mismatch for " + params_[i].first);
    if (steps < 0) throw UsageError("AdamW::restore: negative step count");
    m_ = std::move(m);
    v_ = std::move(v);
    t_ = steps;
  }

  void zero_grad() {
    for (auto& [name, p] : params_) {
      (void)name;
      p.zero_grad();
    }
  }

  void step(S lr) {
    ++t_;
    const S bc1 = S(1) - static_cast<S>(std::pow(double(cfg_.beta1), double(t_)));
    const S bc2 = S(1) - static_cast<S>(std::pow(double(cfg_.beta2), double(t_)));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].second;
      const auto& g = p.grad();
      const int64_t n = p.numel();
      S* vals = p.values().data();
      S* m = m_[i].data();
      S* v = v_[i].data();
      for (int64_t j = 0; j < n; ++j) {
        const S gj = g.empty() ? S(0) : g[j];
        if (!std::isfinite(double(gj)))
          throw NumericError("AdamW: non-finite gradient in " + params_[i].first);
        m[j] = cfg_.beta1 * m[j] + (S(1) - cfg_.beta1) * gj;
        v[j] = cfg_.beta2 * v[j] + (S(1) - cfg_.beta2) * gj * gj;
        const S mhat = m[j] / bc1;
        const S vhat = v[j] / bc2;
        vals[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                         cfg_.weight_decay * vals[j]);
      }
    }
  }

 private:
  NamedParams<S> params_;
  AdamWConfig<S> cfg_;
  std::vector<std::vector<S>> m_;
  std::vector<std::vector<S>> v_;
  int64_t t_ = 0;
};

}  // namespace mam2
