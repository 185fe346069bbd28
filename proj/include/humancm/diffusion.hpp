#pragma once

// Discrete noise schedule, forward perturbation, the deterministic DDIM
// solver, noise-prediction teacher training and multi-step teacher sampling.

#include <algorithm>
#include <numeric>
#include <vector>

#include "humancm/denoiser.hpp"
#include "humancm/latent.hpp"
#include "humancm/optim.hpp"

namespace humancm {

/// Timesteps are indices n in {0..N}; n = 0 is clean data.
struct NoiseSchedule {
  int steps = 0;                    // N
  double beta_min = 0.0;
  double beta_max = 0.0;
  std::vector<double> betas;        // N entries, betas[i] is beta_{i+1}
  std::vector<double> alphas_cum;   // N + 1 entries, alphas_cum[0] = 1

  double alpha_bar(int n) const {
    require(n >= 0 && n <= steps, "NoiseSchedule: timestep " + std::to_string(n) + " out of [0, " +
                                      std::to_string(steps) + "]");
    return alphas_cum[static_cast<std::size_t>(n)];
  }
};

inline NoiseSchedule build_schedule(int steps, double beta_min, double beta_max) {
  require(steps >= 1, "schedule.steps must be >= 1");
  require(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0,
          "schedule: require 0 < beta_min <= beta_max < 1");
  NoiseSchedule s;
  s.steps = steps;
  s.beta_min = beta_min;
  s.beta_max = beta_max;
  s.alphas_cum.push_back(1.0);
  for (int i = 0; i < steps; ++i) {
    const double beta =
        steps == 1 ? beta_min : beta_min + (beta_max - beta_min) * i / static_cast<double>(steps - 1);
    s.betas.push_back(beta);
    s.alphas_cum.push_back(s.alphas_cum.back() * (1.0 - beta));
  }
  return s;
}

/// sqrt(abar_n) * y0 + sqrt(1 - abar_n) * noise.
inline Matrix diffusion_forward(const Matrix& y0, int n, const Matrix& noise,
                                const NoiseSchedule& sched) {
  require(y0.rows() == noise.rows() && y0.cols() == noise.cols(),
          "diffusion_forward: noise shape mismatch");
  const double ab = sched.alpha_bar(n);
  return std::sqrt(ab) * y0 + std::sqrt(1.0 - ab) * noise;
}

/// Clean-signal estimate implied by a noise prediction at timestep n.
inline Matrix implied_clean(const Matrix& y_n, const Matrix& eps_hat, int n,
                            const NoiseSchedule& sched) {
  const double ab = sched.alpha_bar(n);
  return (y_n - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab);
}

/// Deterministic (eta = 0) DDIM update n -> n_to given the noise prediction.
inline Matrix ddim_update(const Matrix& y_n, const Matrix& eps_hat, int n, int n_to,
                          const NoiseSchedule& sched) {
  require(n_to >= 0 && n_to < n, "ddim_step: target timestep must satisfy 0 <= n' < n");
  const Matrix y0_hat = implied_clean(y_n, eps_hat, n, sched);
  const double ab_to = sched.alpha_bar(n_to);
  return std::sqrt(ab_to) * y0_hat + std::sqrt(1.0 - ab_to) * eps_hat;
}

/// ddim_update applied per sample to a stacked batch.
inline Matrix ddim_update_batch(const Matrix& y, const Matrix& eps_hat, const std::vector<int>& from,
                                const std::vector<int>& to, const NoiseSchedule& sched) {
  const auto batch = static_cast<Eigen::Index>(from.size());
  require(batch > 0 && to.size() == from.size() && y.rows() % batch == 0,
          "ddim_update_batch: bad batch layout");
  const Eigen::Index rows = y.rows() / batch;
  Matrix out(y.rows(), y.cols());
  for (Eigen::Index b = 0; b < batch; ++b) {
    const auto i = static_cast<std::size_t>(b);
    out.middleRows(b * rows, rows) = ddim_update(y.middleRows(b * rows, rows),
                                                 eps_hat.middleRows(b * rows, rows), from[i], to[i], sched);
  }
  return out;
}

/// Teacher noise prediction for a batch; the guidance input is always 0.
inline Matrix predict_eps(const DenoiserParams& teacher, const Matrix& y, const std::vector<int>& n,
                          const Matrix& conditions, const std::vector<bool>& null_condition,
                          EvalCounter* counter = nullptr) {
  DenoiserBatch batch;
  batch.latents = y;
  batch.conditions = conditions;
  batch.null_condition = null_condition;
  batch.timesteps.assign(n.begin(), n.end());
  batch.guidance.assign(n.size(), 0.0);
  return denoiser_forward(teacher, batch, counter);
}

/// Single-sample prediction; `condition == nullptr` selects the null condition.
inline Matrix predict_eps(const DenoiserParams& teacher, const Matrix& y_n, int n,
                          const Matrix* condition, EvalCounter* counter = nullptr) {
  return denoiser_forward(teacher, single_batch(y_n, n, 0.0, condition, teacher.arch), counter);
}

/// One solver step n -> n_to with the teacher's noise prediction.
inline Matrix ddim_step(const Matrix& y_n, int n, int n_to, const DenoiserParams& teacher,
                        const Matrix* condition, const NoiseSchedule& sched,
                        EvalCounter* counter = nullptr) {
  require(n_to >= 0 && n_to < n, "ddim_step: target timestep must satisfy 0 <= n' < n");
  return ddim_update(y_n, predict_eps(teacher, y_n, n, condition, counter), n, n_to, sched);
}

/// Timesteps N = g_0 > g_1 > ... > g_steps = 0, uniformly spaced.
inline std::vector<int> sampling_grid(int n_total, int steps) {
  require(steps >= 1 && steps <= n_total, "sampling steps must be in [1, N]");
  std::vector<int> grid;
  for (int i = 0; i <= steps; ++i)
    grid.push_back(static_cast<int>(std::lround(static_cast<double>(n_total) * (steps - i) / steps)));
  return grid;
}

/// Multi-step conditional DDIM sampling of a stacked batch of starting
/// noises that share one condition. Uses exactly `steps` network evaluations
/// per sample.
inline Matrix teacher_sample(const Matrix& noise, int steps, const DenoiserParams& teacher,
                             const Matrix& condition, const NoiseSchedule& sched,
                             EvalCounter* counter = nullptr) {
  const ArchConfig& a = teacher.arch;
  require(noise.rows() % a.latent_rows == 0, "teacher_sample: noise rows not a multiple of l");
  const Eigen::Index k = noise.rows() / a.latent_rows;
  const Matrix conds = condition.replicate(k, 1);
  const std::vector<bool> nulls(static_cast<std::size_t>(k), false);
  const auto grid = sampling_grid(sched.steps, steps);
  Matrix y = noise;
  for (int i = 0; i < steps; ++i) {
    const std::vector<int> from(static_cast<std::size_t>(k), grid[static_cast<std::size_t>(i)]);
    const std::vector<int> to(static_cast<std::size_t>(k), grid[static_cast<std::size_t>(i) + 1]);
    y = ddim_update_batch(y, predict_eps(teacher, y, from, conds, nulls, counter), from, to, sched);
  }
  return y;
}

struct TeacherConfig {
  int epochs = 300;
  int batch = 32;
  double p_uncond = 0.1;
  std::uint64_t seed = 11;
  LrSchedule lr;
  AdamConfig adam;

  void validate() const {
    require(epochs >= 1, "teacher.epochs must be >= 1");
    require(batch >= 1, "teacher.batch must be >= 1");
    require(p_uncond >= 0.0 && p_uncond <= 1.0, "teacher.p_uncond must be in [0, 1]");
    lr.validate();
  }
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainHistory {
  double initial_loss = 0.0;  // full pass at the initial parameters
  std::vector<EpochLog> epochs;
};

namespace detail {

/// Epoch-`epoch` visiting order of `n` items.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = derive_rng(seed, static_cast<std::uint64_t>(epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

inline Matrix stack_rows(const std::vector<Matrix>& parts) {
  Eigen::Index rows = 0;
  for (const auto& p : parts) rows += p.rows();
  Matrix out(rows, parts.front().cols());
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p;
    r += p.rows();
  }
  return out;
}

/// Noise-prediction batch and its regression targets.
struct TeacherBatch {
  DenoiserBatch input;
  Matrix target_noise;
};

inline TeacherBatch draw_teacher_batch(const LatentDataset& data, const std::size_t* idx, std::size_t count,
                                       const NoiseSchedule& sched, double p_uncond, Rng& rng) {
  std::uniform_int_distribution<int> step(1, sched.steps);
  std::bernoulli_distribution drop(p_uncond);
  std::vector<Matrix> ys, cs, eps;
  TeacherBatch tb;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = idx[i];
    const int n = step(rng);
    Matrix e = standard_normal(data.targets[j].rows(), data.targets[j].cols(), rng);
    ys.push_back(diffusion_forward(data.targets[j], n, e, sched));
    cs.push_back(data.conditions[j]);
    eps.push_back(std::move(e));
    tb.input.timesteps.push_back(n);
    tb.input.guidance.push_back(0.0);
    tb.input.null_condition.push_back(drop(rng));
  }
  tb.input.latents = stack_rows(ys);
  tb.input.conditions = stack_rows(cs);
  tb.target_noise = stack_rows(eps);
  return tb;
}

}  // namespace detail

/// Mean squared noise-prediction error of `params` over one seeded pass.
inline double teacher_loss_pass(const DenoiserParams& params, const LatentDataset& data,
                                const NoiseSchedule& sched, const TeacherConfig& cfg,
                                std::uint64_t stream) {
  Rng rng = derive_rng(cfg.seed ^ 0xa5a5a5a5ULL, stream);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double total = 0.0;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
    const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), order.size() - start);
    auto tb = detail::draw_teacher_batch(data, order.data() + start, count, sched, cfg.p_uncond, rng);
    const Matrix pred = denoiser_forward(params, tb.input);
    total += (pred - tb.target_noise).squaredNorm();
  }
  return total / (static_cast<double>(data.size()) * static_cast<double>(data.targets.front().size()));
}

struct TeacherResult {
  DenoiserParams params;
  TrainHistory history;
};

/// Noise-prediction training with random condition dropout.
inline TeacherResult train_teacher(const LatentDataset& data, const NoiseSchedule& sched,
                                   const ArchConfig& arch, const TeacherConfig& cfg) {
  require(data.size() > 0, "train_teacher: empty dataset");
  cfg.validate();
  TeacherResult out{init_params(arch), {}};
  out.history.initial_loss = teacher_loss_pass(out.params, data, sched, cfg, 0);
  AdamState adam = AdamState::zeros_like(out.params.arrays);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(cfg.lr, epoch);
    const auto order = detail::epoch_order(data.size(), cfg.seed, epoch);
    Rng rng = derive_rng(cfg.seed + 1, static_cast<std::uint64_t>(epoch));
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), order.size() - start);
      auto tb = detail::draw_teacher_batch(data, order.data() + start, count, sched, cfg.p_uncond, rng);
      const std::vector<double> weights(count, 1.0 / static_cast<double>(count));
      auto [loss, grads] = ad::value_and_grad(
          out.params.arrays, [&](ad::Tape& tape, const std::vector<ad::Var>& leaves) {
            const ad::Var pred = denoiser_forward(tape, out.params, leaves, tb.input);
            return tape.distance(pred, tb.target_noise, weights, ad::Distance::SquaredL2);
          });
      adam_step(out.params.arrays, grads, adam, lr, cfg.adam);
      loss_sum += loss;
      ++batches;
    }
    const double mean = loss_sum / static_cast<double>(batches);
    if (!std::isfinite(mean))
      throw NumericalError("train_teacher: non-finite loss at epoch " + std::to_string(epoch));
    out.history.epochs.push_back({epoch, lr, mean});
  }
  return out;
}

}  // namespace humancm
