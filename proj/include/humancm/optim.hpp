#pragma once

// Adam, the step learning-rate schedule and EMA target updates over lists of
// parameter arrays.

#include <vector>

#include "humancm/common.hpp"

namespace humancm {

using ParamArrays = std::vector<Matrix>;

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // global gradient max-norm; 0 disables clipping
};

struct AdamState {
  ParamArrays m;
  ParamArrays v;
  std::int64_t step = 0;

  static AdamState zeros_like(const ParamArrays& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.push_back(Matrix::Zero(p.rows(), p.cols()));
      s.v.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
    return s;
  }
};

struct LrSchedule {
  double base_lr = 3e-4;
  double decay_factor = 0.9;
  int decay_every = 75;

  void validate() const {
    require(base_lr > 0.0, "optim.lr must be > 0");
    require(decay_factor > 0.0 && decay_factor <= 1.0, "optim.decay must be in (0, 1]");
    require(decay_every >= 1, "optim.decay_every must be >= 1");
  }
};

inline double lr_at(const LrSchedule& schedule, int epoch) {
  require(epoch >= 0, "lr_at: epoch must be >= 0");
  return schedule.base_lr * std::pow(schedule.decay_factor, epoch / schedule.decay_every);
}

inline double global_norm(const ParamArrays& arrays) {
  double sq = 0.0;
  for (const auto& a : arrays) sq += a.squaredNorm();
  return std::sqrt(sq);
}

/// One bias-corrected Adam update in place.
inline void adam_step(ParamArrays& params, const ParamArrays& grads, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
  require(params.size() == grads.size() && params.size() == state.m.size() &&
              params.size() == state.v.size(),
          "adam_step: parameter / gradient / state count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(params[i].rows() == grads[i].rows() && params[i].cols() == grads[i].cols(),
            "adam_step: gradient shape mismatch");
    if (!grads[i].allFinite()) throw NumericalError("adam_step: non-finite gradient");
  }
  double clip = 1.0;
  if (cfg.clip_norm > 0.0) {
    const double norm = global_norm(grads);
    if (norm > cfg.clip_norm) clip = cfg.clip_norm / norm;
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto g = (clip * grads[i]).array();
    state.m[i].array() = cfg.beta1 * state.m[i].array() + (1.0 - cfg.beta1) * g;
    state.v[i].array() = cfg.beta2 * state.v[i].array() + (1.0 - cfg.beta2) * g.square();
    params[i].array() -=
        lr * (state.m[i].array() / bc1) / ((state.v[i].array() / bc2).sqrt() + cfg.eps);
  }
}

/// target <- rho * target + (1 - rho) * online, elementwise.
inline void ema_update(ParamArrays& target, const ParamArrays& online, double rho) {
  require(rho >= 0.0 && rho <= 1.0, "ema_update: rate must be in [0, 1]");
  require(target.size() == online.size(), "ema_update: array count mismatch");
  for (std::size_t i = 0; i < target.size(); ++i) {
    require(target[i].rows() == online[i].rows() && target[i].cols() == online[i].cols(),
            "ema_update: shape mismatch");
    target[i] = rho * target[i] + (1.0 - rho) * online[i];
  }
}

}  // namespace humancm
