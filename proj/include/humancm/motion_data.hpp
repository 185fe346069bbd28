#pragma once

// Motion sequences, history/future tasks, the synthetic motion generator and
// the history-conditioning signal.

#include <algorithm>
#include <numbers>
#include <string>
#include <vector>

#include "humancm/common.hpp"
#include "humancm/spectral_codec.hpp"

namespace humancm {

/// frames x (3 * joints) joint coordinates.
struct MotionSequence {
  int joints = 0;
  Matrix coords;

  Eigen::Index frames() const { return coords.rows(); }
  Eigen::Index channels() const { return coords.cols(); }

  void validate() const {
    require(joints >= 1, "MotionSequence: joint count must be >= 1");
    require(coords.rows() >= 1, "MotionSequence: frame count must be >= 1");
    require(coords.cols() == 3 * joints, "MotionSequence: expected 3J channels");
    require(coords.allFinite(), "MotionSequence: coordinates must be finite");
  }
};

struct PredictionTask {
  MotionSequence history;
  MotionSequence future;

  int joints() const { return history.joints; }
  Eigen::Index history_frames() const { return history.frames(); }
  Eigen::Index future_frames() const { return future.frames(); }

  MotionSequence full() const {
    Matrix all(history.frames() + future.frames(), history.channels());
    all.topRows(history.frames()) = history.coords;
    all.bottomRows(future.frames()) = future.coords;
    return {history.joints, std::move(all)};
  }

  /// Last observed pose, the key used to group multi-modal ground truths.
  RowVector last_observed_pose() const { return history.coords.bottomRows(1); }
};

inline PredictionTask split_history_future(const MotionSequence& seq, Eigen::Index history,
                                           Eigen::Index future) {
  require(history >= 1 && future >= 1, "split_history_future: H and F must be >= 1");
  require(seq.frames() == history + future,
          "split_history_future: sequence has " + std::to_string(seq.frames()) +
              " frames, expected H+F = " + std::to_string(history + future));
  return {{seq.joints, seq.coords.topRows(history)}, {seq.joints, seq.coords.bottomRows(future)}};
}

struct SyntheticConfig {
  int joints = 5;
  int history = 10;
  int future = 20;
  int n_sequences = 512;
  std::vector<std::string> motion_families{"oscillator", "walker", "turn"};
  double amplitude_min = 0.05;
  double amplitude_max = 0.3;
  double frequency_min = 0.01;  // cycles per frame
  double frequency_max = 0.05;
  double speed_min = 0.005;  // length units per frame
  double speed_max = 0.03;
  double noise_std = 0.005;
  std::uint64_t seed = 7;

  void validate() const {
    require(joints >= 1, "data.joints must be >= 1");
    require(history >= 1, "data.history must be >= 1");
    require(future >= 1, "data.future must be >= 1");
    require(n_sequences >= 1, "data.n_sequences must be >= 1");
    require(!motion_families.empty(), "data.families must not be empty");
    for (const auto& f : motion_families)
      require(f == "oscillator" || f == "walker" || f == "turn",
              "data.families: unknown motion family '" + f + "'");
    require(amplitude_min >= 0.0 && amplitude_min <= amplitude_max,
            "data.amplitude_min/amplitude_max must form a non-empty range");
    require(frequency_min >= 0.0 && frequency_min <= frequency_max,
            "data.frequency_min/frequency_max must form a non-empty range");
    require(speed_min >= 0.0 && speed_min <= speed_max,
            "data.speed_min/speed_max must form a non-empty range");
    require(noise_std >= 0.0, "data.noise_std must be >= 0");
  }
};

/// Rest position of joint `j`: a vertical chain spaced 0.25 apart.
inline double skeleton_offset(int joint, int axis) { return axis == 1 ? 0.25 * joint : 0.0; }

namespace detail {

inline double uniform(Rng& rng, double lo, double hi) {
  if (lo == hi) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline void add_oscillation(Matrix& coords, const SyntheticConfig& cfg, Rng& rng) {
  for (Eigen::Index ch = 0; ch < coords.cols(); ++ch) {
    const double amp = uniform(rng, cfg.amplitude_min, cfg.amplitude_max);
    const double freq = uniform(rng, cfg.frequency_min, cfg.frequency_max);
    const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    for (Eigen::Index t = 0; t < coords.rows(); ++t)
      coords(t, ch) +=
          amp * std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(t) + phase);
  }
}

inline Eigen::Vector3d planar_velocity(const SyntheticConfig& cfg, Rng& rng) {
  const double speed = uniform(rng, cfg.speed_min, cfg.speed_max);
  const double heading = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  return {speed * std::cos(heading), 0.0, speed * std::sin(heading)};
}

inline void add_root_path(Matrix& coords, const std::vector<Eigen::Vector3d>& root) {
  const Eigen::Index joints = coords.cols() / 3;
  for (Eigen::Index t = 0; t < coords.rows(); ++t)
    for (Eigen::Index j = 0; j < joints; ++j)
      for (int a = 0; a < 3; ++a) coords(t, 3 * j + a) += root[static_cast<std::size_t>(t)][a];
}

}  // namespace detail

/// One sequence of `frames` frames, fully determined by (cfg.seed, index).
inline MotionSequence generate_sequence(const SyntheticConfig& cfg, std::uint64_t index) {
  Rng rng = derive_rng(cfg.seed, index);
  const Eigen::Index frames = cfg.history + cfg.future;
  Matrix coords(frames, 3 * cfg.joints);
  for (int j = 0; j < cfg.joints; ++j)
    for (int a = 0; a < 3; ++a) coords.col(3 * j + a).setConstant(skeleton_offset(j, a));

  const auto family_index = std::uniform_int_distribution<std::size_t>(
      0, cfg.motion_families.size() - 1)(rng);
  const std::string& family = cfg.motion_families[family_index];

  std::vector<Eigen::Vector3d> root(static_cast<std::size_t>(frames), Eigen::Vector3d::Zero());
  if (family == "oscillator") {
    detail::add_oscillation(coords, cfg, rng);
  } else if (family == "walker") {
    const Eigen::Vector3d v = detail::planar_velocity(cfg, rng);
    for (Eigen::Index t = 0; t < frames; ++t)
      root[static_cast<std::size_t>(t)] = v * static_cast<double>(t);
    detail::add_root_path(coords, root);
    detail::add_oscillation(coords, cfg, rng);
  } else {  // turn
    const Eigen::Vector3d v1 = detail::planar_velocity(cfg, rng);
    const Eigen::Vector3d v2 = detail::planar_velocity(cfg, rng);
    const auto switch_at =
        std::uniform_int_distribution<Eigen::Index>(1, std::max<Eigen::Index>(1, frames - 1))(rng);
    for (Eigen::Index t = 1; t < frames; ++t)
      root[static_cast<std::size_t>(t)] =
          root[static_cast<std::size_t>(t - 1)] + (t <= switch_at ? v1 : v2);
    detail::add_root_path(coords, root);
  }

  if (cfg.noise_std > 0.0) coords += cfg.noise_std * standard_normal(frames, coords.cols(), rng);
  return {cfg.joints, std::move(coords)};
}

/// Tasks for sequence indices [first, first + count).
inline std::vector<PredictionTask> generate_synthetic_dataset(const SyntheticConfig& cfg,
                                                              std::uint64_t first,
                                                              std::uint64_t count) {
  cfg.validate();
  std::vector<PredictionTask> tasks;
  tasks.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i)
    tasks.push_back(split_history_future(generate_sequence(cfg, first + i), cfg.history,
                                         cfg.future));
  return tasks;
}

inline std::vector<PredictionTask> generate_synthetic_dataset(const SyntheticConfig& cfg) {
  return generate_synthetic_dataset(cfg, 0, static_cast<std::uint64_t>(cfg.n_sequences));
}

/// Repeat the last observed frame F times, then keep the lowest l frequencies.
inline SpectralCoeffs build_condition(const MotionSequence& history, Eigen::Index future,
                                      const DctBasis& basis, Eigen::Index l) {
  require(history.frames() >= 1, "build_condition: empty history");
  require(basis.n == history.frames() + future,
          "build_condition: basis size must equal H + F");
  Matrix padded(basis.n, history.channels());
  padded.topRows(history.frames()) = history.coords;
  padded.bottomRows(future) = history.coords.bottomRows(1).replicate(future, 1);
  return dct_forward(padded, basis, l);
}

}  // namespace humancm
