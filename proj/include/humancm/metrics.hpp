#pragma once

// Best-of-K displacement metrics for stochastic motion prediction and the
// sampler benchmark harness.

#include <algorithm>
#include <chrono>
#include <functional>
#include <limits>
#include <vector>

#include "humancm/motion_data.hpp"

namespace humancm {

namespace detail {

inline void check_samples(const std::vector<Matrix>& samples, const Matrix& gt) {
  require(!samples.empty(), "metrics: need at least one sample");
  for (const auto& s : samples)
    require(s.rows() == gt.rows() && s.cols() == gt.cols(),
            "metrics: sample shape does not match ground truth");
  require(gt.rows() >= 1, "metrics: empty ground truth");
}

}  // namespace detail

/// min_k mean_f |sample_k(f) - gt(f)|_2, the norm taken over the whole pose.
inline double ade(const std::vector<Matrix>& samples, const Matrix& gt) {
  detail::check_samples(samples, gt);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& s : samples)
    best = std::min(best, (s - gt).rowwise().norm().mean());
  return best;
}

/// min_k |sample_k(F) - gt(F)|_2.
inline double fde(const std::vector<Matrix>& samples, const Matrix& gt) {
  detail::check_samples(samples, gt);
  double best = std::numeric_limits<double>::infinity();
  const Eigen::Index last = gt.rows() - 1;
  for (const auto& s : samples) best = std::min(best, (s.row(last) - gt.row(last)).norm());
  return best;
}

/// For every task, the indices of all tasks (itself included) whose last
/// observed pose lies within `threshold` of its own.
inline std::vector<std::vector<std::size_t>> build_mm_gt(const std::vector<PredictionTask>& tasks,
                                                         double threshold) {
  require(threshold > 0.0, "build_mm_gt: threshold must be > 0");
  std::vector<RowVector> last;
  last.reserve(tasks.size());
  for (const auto& t : tasks) last.push_back(t.last_observed_pose());
  std::vector<std::vector<std::size_t>> groups(tasks.size());
  for (std::size_t i = 0; i < tasks.size(); ++i)
    for (std::size_t j = 0; j < tasks.size(); ++j)
      if ((last[i] - last[j]).norm() <= threshold) groups[i].push_back(j);
  return groups;
}

inline double mmade(const std::vector<Matrix>& samples, const std::vector<Matrix>& gt_set) {
  require(!gt_set.empty(), "mmade: empty ground-truth set");
  double sum = 0.0;
  for (const auto& g : gt_set) sum += ade(samples, g);
  return sum / static_cast<double>(gt_set.size());
}

inline double mmfde(const std::vector<Matrix>& samples, const std::vector<Matrix>& gt_set) {
  require(!gt_set.empty(), "mmfde: empty ground-truth set");
  double sum = 0.0;
  for (const auto& g : gt_set) sum += fde(samples, g);
  return sum / static_cast<double>(gt_set.size());
}

struct MetricReport {
  double ade = 0.0;
  double fde = 0.0;
  double mmade = 0.0;
  double mmfde = 0.0;
  std::int64_t samples = 0;  // K per test item
  std::int64_t network_evals = 0;
  double wall_seconds = 0.0;
};

/// Test-set means of the four metrics; `samples[i]` are the K futures for
/// tasks[i].
inline MetricReport evaluate(const std::vector<PredictionTask>& tasks,
                             const std::vector<std::vector<Matrix>>& samples, double threshold) {
  require(!tasks.empty(), "evaluate: empty test set");
  require(samples.size() == tasks.size(), "evaluate: sample sets do not match test items");
  const auto groups = build_mm_gt(tasks, threshold);
  MetricReport r;
  r.samples = static_cast<std::int64_t>(samples.front().size());
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const Matrix& gt = tasks[i].future.coords;
    std::vector<Matrix> mm;
    for (std::size_t j : groups[i]) mm.push_back(tasks[j].future.coords);
    r.ade += ade(samples[i], gt);
    r.fde += fde(samples[i], gt);
    r.mmade += mmade(samples[i], mm);
    r.mmfde += mmfde(samples[i], mm);
  }
  const double n = static_cast<double>(tasks.size());
  r.ade /= n;
  r.fde /= n;
  r.mmade /= n;
  r.mmfde /= n;
  return r;
}

/// Produces K futures for test item `index`, counting network evaluations.
using Sampler = std::function<std::vector<Matrix>(std::size_t index, std::int64_t& network_evals)>;

/// Runs `sampler` over the whole test set `repetitions` times; metrics come
/// from the first run, wall time is the median over runs.
inline MetricReport bench(const Sampler& sampler, const std::vector<PredictionTask>& tasks,
                          int repetitions, double threshold) {
  require(repetitions >= 1, "bench: repetitions must be >= 1");
  std::vector<double> times;
  std::vector<std::vector<Matrix>> first;
  std::int64_t evals_first = 0;
  for (int rep = 0; rep < repetitions; ++rep) {
    std::vector<std::vector<Matrix>> out;
    out.reserve(tasks.size());
    std::int64_t evals = 0;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < tasks.size(); ++i) out.push_back(sampler(i, evals));
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double>(t1 - t0).count());
    if (rep == 0) {
      first = std::move(out);
      evals_first = evals;
    }
  }
  MetricReport r = evaluate(tasks, first, threshold);
  r.network_evals = evals_first;
  std::sort(times.begin(), times.end());
  const std::size_t mid = times.size() / 2;
  r.wall_seconds = times.size() % 2 == 1 ? times[mid] : 0.5 * (times[mid - 1] + times[mid]);
  return r;
}

}  // namespace humancm
