#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "errors.hpp"

namespace mags {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Moments for one parameter group. `step` counts updates applied to the
// group; rows added later start from zero moments but share the counter.
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;

  void resize(std::size_t n) {
    m.resize(n, 0.0);
    v.resize(n, 0.0);
  }

  // Rebuilds the moments for a reordered/grown/shrunk group of `width`-sized
  // rows; source[i] is the old row index or -1 for a fresh row.
  void remap(const std::vector<int>& source, std::size_t width) {
    std::vector<double> nm(source.size() * width, 0.0), nv(source.size() * width, 0.0);
    for (std::size_t i = 0; i < source.size(); ++i) {
      if (source[i] < 0) continue;
      const std::size_t from = static_cast<std::size_t>(source[i]) * width;
      std::copy_n(m.begin() + from, width, nm.begin() + i * width);
      std::copy_n(v.begin() + from, width, nv.begin() + i * width);
    }
    m = std::move(nm);
    v = std::move(nv);
  }

  void reset_rows(const std::vector<int>& rows, std::size_t width) {
    for (int r : rows) {
      std::fill_n(m.begin() + r * width, width, 0.0);
      std::fill_n(v.begin() + r * width, width, 0.0);
    }
  }
};

/// One bias-corrected Adam update with decoupled weight decay: parameters
/// shrink by lr * weight_decay before the moment step.
inline void adam_step(AdamState& st, double* params, const double* grads, std::size_t n, double lr,
                      double weight_decay = 0.0, const AdamConfig& cfg = {}) {
  if (st.m.size() != n) {
    if (!st.m.empty()) fail(ErrorCode::ShapeMismatch, "adam state does not match parameter count");
    st.resize(n);
  }
  ++st.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  const double step_size = lr / bc1;
  const double sqrt_bc2 = std::sqrt(bc2);
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grads[i];
    params[i] -= lr * weight_decay * params[i];
    st.m[i] = cfg.beta1 * st.m[i] + (1 - cfg.beta1) * g;
    st.v[i] = cfg.beta2 * st.v[i] + (1 - cfg.beta2) * g * g;
    params[i] -= step_size * st.m[i] / (std::sqrt(st.v[i]) / sqrt_bc2 + cfg.eps);
  }
}

inline void adam_step(AdamState& st, std::vector<double>& params, const std::vector<double>& grads, double lr,
                      double weight_decay = 0.0, const AdamConfig& cfg = {}) {
  if (params.size() != grads.size()) fail(ErrorCode::ShapeMismatch, "parameter and gradient sizes differ");
  adam_step(st, params.data(), grads.data(), params.size(), lr, weight_decay, cfg);
}

// Log-linear interpolation from `init` to `final` over `max_steps`.
inline double exponential_lr(double init, double final_lr, std::int64_t step, std::int64_t max_steps) {
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(std::max<std::int64_t>(1, max_steps)),
                              0.0, 1.0);
  return std::exp(std::log(init) * (1 - t) + std::log(final_lr) * t);
}

// Linear ramp over `warmup` steps, then divided by ten at each milestone.
inline double network_lr(double base, std::int64_t step, std::int64_t warmup, const std::vector<std::int64_t>& milestones) {
  double lr = base;
  if (warmup > 0 && step < warmup) lr *= static_cast<double>(step + 1) / static_cast<double>(warmup);
  for (auto m : milestones) {
    if (step >= m) lr *= 0.1;
  }
  return lr;
}

}  // namespace mags
