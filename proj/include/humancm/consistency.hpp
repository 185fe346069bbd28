#pragma once

// One-step consistency student distilled from the DDIM teacher.
//
//   f(y, n, w, c) = c_skip(n) * y + c_out(n) * F(y, n, w, c)
//
// with c_skip(0) = 1 and c_out(0) = 0, trained so that f at a noisy point
// y_{n+k} matches the EMA target's f at the guided teacher solve y_hat_n,
// plus a weighted reconstruction term anchoring f to the clean latent.

#include <algorithm>
#include <vector>

#include "humancm/diffusion.hpp"

namespace humancm {

struct ConsistencyConfig {
  int k = 10;        // fixed skip interval
  int k_max = 0;     // > 0: sample k uniformly from {1..k_max} instead
  double w_min = 0.0;
  double w_max = 1.0;
  double w_star = 1.0 / 125.0;
  double lambda = 1.0 / 15.0;
  double rho = 0.95;
  double sigma_data = 0.5;
  ad::Distance distance = ad::Distance::SquaredL2;
  double huber_c = 1e-3;
  int epochs = 300;
  int batch = 32;
  std::uint64_t seed = 23;
  bool use_ema = true;  // sample with the EMA target parameters
  LrSchedule lr;
  AdamConfig adam;

  void validate(const NoiseSchedule& sched) const {
    const int kk = k_max > 0 ? k_max : k;
    require(kk >= 1 && kk < sched.steps, "consistency.k (or k_max) must satisfy 1 <= k < N");
    require(w_min <= w_max, "consistency.w_min must be <= consistency.w_max");
    require(std::isfinite(w_star), "consistency.w_star must be finite");
    require(lambda >= 0.0, "consistency.lambda must be >= 0");
    require(rho >= 0.0 && rho <= 1.0, "consistency.rho must be in [0, 1]");
    require(sigma_data > 0.0, "consistency.sigma_data must be > 0");
    require(huber_c > 0.0, "consistency.huber_c must be > 0");
    require(epochs >= 1, "consistency.epochs must be >= 1");
    require(batch >= 1, "consistency.batch must be >= 1");
    lr.validate();
  }
};

struct StudentParams {
  DenoiserParams online;
  DenoiserParams target;

  const DenoiserParams& for_sampling(const ConsistencyConfig& cfg) const {
    return cfg.use_ema ? target : online;
  }
};

struct BoundaryCoeffs {
  double skip = 1.0;
  double out = 0.0;
};

/// With tau = n / N: c_skip = s^2 / (tau^2 + s^2), c_out = s * tau / sqrt(tau^2 + s^2).
inline BoundaryCoeffs boundary_coeffs(int n, const NoiseSchedule& sched, double sigma_data) {
  require(n >= 0 && n <= sched.steps, "boundary_coeffs: timestep out of range");
  const double tau = static_cast<double>(n) / static_cast<double>(sched.steps);
  const double s2 = sigma_data * sigma_data;
  return {s2 / (tau * tau + s2), sigma_data * tau / std::sqrt(tau * tau + s2)};
}

/// Records f on `tape` for a batch whose timesteps are schedule indices.
inline ad::Var consistency_forward(ad::Tape& tape, const DenoiserParams& p,
                                   const std::vector<ad::Var>& leaves, const DenoiserBatch& batch,
                                   const NoiseSchedule& sched, double sigma_data,
                                   EvalCounter* counter = nullptr) {
  const ad::Var net = denoiser_forward(tape, p, leaves, batch, counter);
  const Eigen::Index rows = p.arch.latent_rows;
  std::vector<double> c_out(batch.timesteps.size());
  Matrix skip_part = batch.latents;
  for (std::size_t b = 0; b < c_out.size(); ++b) {
    const auto c = boundary_coeffs(static_cast<int>(batch.timesteps[b]), sched, sigma_data);
    c_out[b] = c.out;
    skip_part.middleRows(static_cast<Eigen::Index>(b) * rows, rows) *= c.skip;
  }
  return tape.scale_shift_groups(net, std::move(c_out), std::move(skip_part));
}

inline Matrix consistency_forward(const DenoiserParams& p, const DenoiserBatch& batch,
                                  const NoiseSchedule& sched, double sigma_data,
                                  EvalCounter* counter = nullptr) {
  ad::Tape tape(false);
  const auto leaves = bind_parameters(tape, p);
  return tape.value(consistency_forward(tape, p, leaves, batch, sched, sigma_data, counter));
}

/// (1 + w) * Phi_c - w * Phi_null, each branch a DDIM solve from -> to,
/// evaluated per sample on a stacked batch. Both branches share one teacher
/// call of 2B samples.
inline Matrix cfg_teacher_target(const Matrix& y, const std::vector<int>& from,
                                 const std::vector<int>& to, const DenoiserParams& teacher,
                                 const Matrix& conditions, const std::vector<double>& w,
                                 const NoiseSchedule& sched, EvalCounter* counter = nullptr) {
  const auto batch = static_cast<Eigen::Index>(from.size());
  require(batch > 0 && to.size() == from.size() && w.size() == from.size(),
          "cfg_teacher_target: per-sample vectors disagree in length");
  for (std::size_t i = 0; i < from.size(); ++i)
    require(to[i] >= 0 && to[i] < from[i] && from[i] <= sched.steps,
            "cfg_teacher_target: require 0 <= n < n+k <= N");
  const Eigen::Index rows = y.rows() / batch;
  Matrix y2(2 * y.rows(), y.cols());
  y2 << y, y;
  Matrix c2(2 * conditions.rows(), conditions.cols());
  c2 << conditions, conditions;
  std::vector<int> from2 = from;
  from2.insert(from2.end(), from.begin(), from.end());
  std::vector<int> to2 = to;
  to2.insert(to2.end(), to.begin(), to.end());
  std::vector<bool> nulls(static_cast<std::size_t>(2 * batch), false);
  std::fill(nulls.begin() + batch, nulls.end(), true);
  const Matrix eps = predict_eps(teacher, y2, from2, c2, nulls, counter);
  const Matrix solved = ddim_update_batch(y2, eps, from2, to2, sched);
  Matrix out(y.rows(), y.cols());
  for (Eigen::Index b = 0; b < batch; ++b) {
    const double wb = w[static_cast<std::size_t>(b)];
    out.middleRows(b * rows, rows) = (1.0 + wb) * solved.middleRows(b * rows, rows) -
                                     wb * solved.middleRows((batch + b) * rows, rows);
  }
  return out;
}

/// Single-sample form of cfg_teacher_target.
inline Matrix cfg_teacher_target(const Matrix& y, int from, int to, const DenoiserParams& teacher,
                                 const Matrix& condition, double w, const NoiseSchedule& sched,
                                 EvalCounter* counter = nullptr) {
  return cfg_teacher_target(y, std::vector<int>{from}, std::vector<int>{to}, teacher, condition,
                            std::vector<double>{w}, sched, counter);
}

/// Everything drawn at random for one distillation iteration.
struct DistillDraw {
  std::vector<std::size_t> items;
  std::vector<int> n;           // target (less noisy) timestep
  std::vector<int> k;           // skip interval; the online point is n + k
  std::vector<double> w;        // guidance scale
  std::vector<int> m;           // reconstruction timestep
  Matrix clean;                 // stacked y_0
  Matrix conditions;            // stacked c
  Matrix noisy;                 // stacked y_{n+k}
  Matrix recon_noisy;           // stacked y_m

  std::size_t size() const { return items.size(); }
};

inline DistillDraw draw_distill_batch(const LatentDataset& data, const std::size_t* idx,
                                      std::size_t count, const ConsistencyConfig& cfg,
                                      const NoiseSchedule& sched, Rng& rng) {
  std::vector<Matrix> ys, cs, noisy, recon;
  DistillDraw d;
  std::uniform_real_distribution<double> wdist(cfg.w_min, cfg.w_max);
  std::uniform_int_distribution<int> mdist(1, sched.steps);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = idx[i];
    const int k = cfg.k_max > 0 ? std::uniform_int_distribution<int>(1, cfg.k_max)(rng) : cfg.k;
    const int n = std::uniform_int_distribution<int>(0, sched.steps - k)(rng);
    const double w = cfg.w_min == cfg.w_max ? cfg.w_min : wdist(rng);
    const Matrix& y0 = data.targets[j];
    noisy.push_back(diffusion_forward(y0, n + k, standard_normal(y0.rows(), y0.cols(), rng), sched));
    const int m = mdist(rng);
    recon.push_back(diffusion_forward(y0, m, standard_normal(y0.rows(), y0.cols(), rng), sched));
    ys.push_back(y0);
    cs.push_back(data.conditions[j]);
    d.items.push_back(j);
    d.n.push_back(n);
    d.k.push_back(k);
    d.w.push_back(w);
    d.m.push_back(m);
  }
  d.clean = detail::stack_rows(ys);
  d.conditions = detail::stack_rows(cs);
  d.noisy = detail::stack_rows(noisy);
  d.recon_noisy = detail::stack_rows(recon);
  return d;
}

/// Gradient-free targets of one iteration.
struct DistillTargets {
  Matrix teacher_estimate;  // guided solve y_hat_n
  Matrix target_output;     // f_target(y_hat_n, n, w, c)
};

inline DistillTargets distill_targets(const DistillDraw& d, const DenoiserParams& teacher,
                                      const DenoiserParams& target, const ConsistencyConfig& cfg,
                                      const NoiseSchedule& sched) {
  std::vector<int> from(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) from[i] = d.n[i] + d.k[i];
  DistillTargets t;
  t.teacher_estimate = cfg_teacher_target(d.noisy, from, d.n, teacher, d.conditions, d.w, sched);
  DenoiserBatch b;
  b.latents = t.teacher_estimate;
  b.conditions = d.conditions;
  b.null_condition.assign(d.size(), false);
  b.timesteps.assign(d.n.begin(), d.n.end());
  b.guidance = d.w;
  t.target_output = consistency_forward(target, b, sched, cfg.sigma_data);
  return t;
}

/// Online batch of 2B samples: the consistency points followed by the
/// reconstruction points.
inline DenoiserBatch online_batch(const DistillDraw& d, const ConsistencyConfig& cfg) {
  const std::size_t b = d.size();
  DenoiserBatch out;
  out.latents.resize(2 * d.noisy.rows(), d.noisy.cols());
  out.latents << d.noisy, d.recon_noisy;
  out.conditions.resize(2 * d.conditions.rows(), d.conditions.cols());
  out.conditions << d.conditions, d.conditions;
  out.null_condition.assign(2 * b, false);
  for (std::size_t i = 0; i < b; ++i) {
    out.timesteps.push_back(d.n[i] + d.k[i]);
    out.guidance.push_back(d.w[i]);
  }
  for (std::size_t i = 0; i < b; ++i) {
    out.timesteps.push_back(d.m[i]);
    out.guidance.push_back(cfg.w_star);
  }
  return out;
}

/// Mean over the batch of d(f(y_{n+k}), target) + lambda * d(f(y_m; w*), y_0).
inline ad::Var distillation_loss(ad::Tape& tape, const DenoiserParams& online,
                                 const std::vector<ad::Var>& leaves, const DistillDraw& d,
                                 const DistillTargets& targets, const ConsistencyConfig& cfg,
                                 const NoiseSchedule& sched) {
  require(d.size() > 0, "distillation_loss: empty batch");
  const std::size_t b = d.size();
  const ad::Var f = consistency_forward(tape, online, leaves, online_batch(d, cfg), sched, cfg.sigma_data);
  Matrix goal(2 * targets.target_output.rows(), targets.target_output.cols());
  goal << targets.target_output, d.clean;
  std::vector<double> weights(2 * b, 1.0 / static_cast<double>(b));
  for (std::size_t i = b; i < 2 * b; ++i) weights[i] = cfg.lambda / static_cast<double>(b);
  return tape.distance(f, goal, weights, cfg.distance, cfg.huber_c);
}

inline std::pair<double, ParamArrays> distillation_loss_and_grad(const DenoiserParams& online,
                                                                 const DistillDraw& d,
                                                                 const DistillTargets& targets,
                                                                 const ConsistencyConfig& cfg,
                                                                 const NoiseSchedule& sched) {
  return ad::value_and_grad(online.arrays, [&](ad::Tape& tape, const std::vector<ad::Var>& leaves) {
    return distillation_loss(tape, online, leaves, d, targets, cfg, sched);
  });
}

/// Teacher and student must agree on everything but the init seed.
inline bool same_structure(const ArchConfig& a, const ArchConfig& b) {
  ArchConfig x = a;
  x.seed = b.seed;
  return x == b;
}

struct StudentResult {
  StudentParams params;
  TrainHistory history;
};

/// Distillation loop. `max_iterations` > 0 stops early after that many
/// optimizer steps (the partial epoch is still logged).
inline StudentResult train_consistency(const LatentDataset& data, const DenoiserParams& teacher,
                                       const ArchConfig& arch, const ConsistencyConfig& cfg,
                                       const NoiseSchedule& sched, long max_iterations = -1) {
  require(data.size() > 0, "train_consistency: empty dataset");
  cfg.validate(sched);
  if (!same_structure(teacher.arch, arch))
    throw ArtifactMismatch("train_consistency: teacher and student architectures differ");
  DenoiserParams online = init_params(arch);
  StudentResult out{{online, online}, {}};
  AdamState adam = AdamState::zeros_like(online.arrays);
  long iteration = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(cfg.lr, epoch);
    const auto order = detail::epoch_order(data.size(), cfg.seed, epoch);
    Rng rng = derive_rng(cfg.seed + 1, static_cast<std::uint64_t>(epoch));
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), order.size() - start);
      const DistillDraw draw = draw_distill_batch(data, order.data() + start, count, cfg, sched, rng);
      const DistillTargets targets = distill_targets(draw, teacher, out.params.target, cfg, sched);
      auto [loss, grads] = distillation_loss_and_grad(out.params.online, draw, targets, cfg, sched);
      if (!std::isfinite(loss))
        throw NumericalError("train_consistency: non-finite loss at epoch " + std::to_string(epoch));
      adam_step(out.params.online.arrays, grads, adam, lr, cfg.adam);
      ema_update(out.params.target.arrays, out.params.online.arrays, cfg.rho);
      loss_sum += loss;
      ++batches;
      if (max_iterations > 0 && ++iteration >= max_iterations) break;
    }
    out.history.epochs.push_back({epoch, lr, loss_sum / static_cast<double>(batches)});
    if (max_iterations > 0 && iteration >= max_iterations) break;
  }
  if (!out.history.epochs.empty()) out.history.initial_loss = out.history.epochs.front().loss;
  return out;
}

/// Stacked standard-normal starting latents for `count` samples; sample i is
/// drawn from its own stream (seed, i).
inline Matrix sample_noise(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, std::size_t count) {
  Matrix out(rows * static_cast<Eigen::Index>(count), cols);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = derive_rng(seed, i);
    out.middleRows(static_cast<Eigen::Index>(i) * rows, rows) = standard_normal(rows, cols, rng);
  }
  return out;
}

/// Latent estimates y_0 = f(y_T, N, w*, c) for a stack of starting noises
/// that share one condition: one network evaluation per sample.
inline Matrix one_step_latents(const DenoiserParams& params, const Matrix& noise, const Matrix& condition,
                               const NoiseSchedule& sched, const ConsistencyConfig& cfg,
                               EvalCounter* counter = nullptr) {
  const Eigen::Index rows = params.arch.latent_rows;
  require(noise.rows() % rows == 0, "one_step_sample: noise rows not a multiple of l");
  const auto count = static_cast<std::size_t>(noise.rows() / rows);
  DenoiserBatch b;
  b.latents = noise;
  b.conditions = condition.replicate(static_cast<Eigen::Index>(count), 1);
  b.null_condition.assign(count, false);
  b.timesteps.assign(count, static_cast<double>(sched.steps));
  b.guidance.assign(count, cfg.w_star);
  return consistency_forward(params, b, sched, cfg.sigma_data, counter);
}

/// K futures (each F x 3J) from K independent noise draws.
inline std::vector<Matrix> multi_sample(const StudentParams& student, const LatentCodec& codec,
                                        const Matrix& condition, const NoiseSchedule& sched,
                                        const ConsistencyConfig& cfg, std::size_t k,
                                        std::uint64_t seed, EvalCounter* counter = nullptr) {
  require(k >= 1, "multi_sample: K must be >= 1");
  codec.check_ready();
  const auto& params = student.for_sampling(cfg);
  const Eigen::Index rows = params.arch.latent_rows;
  const Matrix y0 = one_step_latents(params, sample_noise(rows, params.arch.channel_dim, seed, k),
                                     condition, sched, cfg, counter);
  std::vector<Matrix> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i)
    out.push_back(codec.decode_future(y0.middleRows(static_cast<Eigen::Index>(i) * rows, rows)));
  return out;
}

/// One predicted future (F x 3J): a single network evaluation then decoding.
inline Matrix one_step_sample(const StudentParams& student, const LatentCodec& codec,
                              const Matrix& condition, const NoiseSchedule& sched,
                              const ConsistencyConfig& cfg, std::uint64_t seed,
                              EvalCounter* counter = nullptr) {
  return multi_sample(student, codec, condition, sched, cfg, 1, seed, counter).front();
}

/// Mean squared disagreement of f between pairs of points on the same
/// teacher DDIM trajectory: for each condition a trajectory is solved from a
/// seeded y_T over `grid_steps` uniform steps, and f(y_n, n, w*, c) is
/// compared over all pairs of visited points.
inline double self_consistency_gap(const DenoiserParams& params, const DenoiserParams& teacher,
                                   const std::vector<Matrix>& conditions, const NoiseSchedule& sched,
                                   const ConsistencyConfig& cfg, int grid_steps, std::uint64_t seed) {
  require(!conditions.empty(), "self_consistency_gap: no conditions");
  const auto grid = sampling_grid(sched.steps, grid_steps);
  const Eigen::Index rows = params.arch.latent_rows;
  const Eigen::Index cols = params.arch.channel_dim;
  const auto items = static_cast<Eigen::Index>(conditions.size());
  const auto points = static_cast<Eigen::Index>(grid.size());
  Matrix conds = detail::stack_rows(conditions);
  const std::vector<bool> nulls(conditions.size(), false);

  // Trajectory points stacked as [point][item].
  std::vector<Matrix> traj;
  Matrix y = sample_noise(rows, cols, seed, conditions.size());
  traj.push_back(y);
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    const std::vector<int> from(conditions.size(), grid[i]);
    const std::vector<int> to(conditions.size(), grid[i + 1]);
    y = ddim_update_batch(y, predict_eps(teacher, y, from, conds, nulls), from, to, sched);
    traj.push_back(y);
  }
  DenoiserBatch b;
  b.latents = detail::stack_rows(traj);
  b.conditions = conds.replicate(points, 1);
  b.null_condition.assign(static_cast<std::size_t>(items * points), false);
  for (Eigen::Index p = 0; p < points; ++p)
    for (Eigen::Index i = 0; i < items; ++i) {
      b.timesteps.push_back(grid[static_cast<std::size_t>(p)]);
      b.guidance.push_back(cfg.w_star);
    }
  const Matrix f = consistency_forward(params, b, sched, cfg.sigma_data);
  double total = 0.0;
  long pairs = 0;
  for (Eigen::Index p1 = 0; p1 < points; ++p1)
    for (Eigen::Index p2 = p1 + 1; p2 < points; ++p2)
      for (Eigen::Index i = 0; i < items; ++i) {
        total += (f.middleRows((p1 * items + i) * rows, rows) - f.middleRows((p2 * items + i) * rows, rows))
                     .squaredNorm();
        ++pairs;
      }
  return total / (static_cast<double>(pairs) * static_cast<double>(rows * cols));
}

}  // namespace humancm
