#pragma once

// Test-set samplers for the multi-step teacher and the one-step student.
// Both draw the starting noise of item i from the same stream, so their
// outputs are directly comparable.

#include <vector>

#include "humancm/consistency.hpp"
#include "humancm/metrics.hpp"

namespace humancm {

inline std::uint64_t item_noise_seed(std::uint64_t seed, std::size_t item) {
  Rng rng = derive_rng(seed, item);
  return rng();
}

/// K futures from `steps` conditional DDIM steps of the teacher.
inline std::vector<Matrix> teacher_multi_sample(const DenoiserParams& teacher, const LatentCodec& codec,
                                                const Matrix& condition, const NoiseSchedule& sched,
                                                int steps, std::size_t k, std::uint64_t seed,
                                                EvalCounter* counter = nullptr) {
  require(k >= 1, "teacher_multi_sample: K must be >= 1");
  codec.check_ready();
  const Eigen::Index rows = teacher.arch.latent_rows;
  const Matrix y0 = teacher_sample(sample_noise(rows, teacher.arch.channel_dim, seed, k), steps, teacher,
                                   condition, sched, counter);
  std::vector<Matrix> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i)
    out.push_back(codec.decode_future(y0.middleRows(static_cast<Eigen::Index>(i) * rows, rows)));
  return out;
}

inline Sampler make_teacher_sampler(const DenoiserParams& teacher, const LatentCodec& codec,
                                    const std::vector<PredictionTask>& tasks, const NoiseSchedule& sched,
                                    int steps, std::size_t k, std::uint64_t seed) {
  return [&teacher, &codec, &tasks, &sched, steps, k, seed](std::size_t i, std::int64_t& evals) {
    EvalCounter counter;
    auto out = teacher_multi_sample(teacher, codec, codec.encode_condition(tasks[i].history), sched, steps, k,
                                    item_noise_seed(seed, i), &counter);
    evals += counter.count;
    return out;
  };
}

inline Sampler make_student_sampler(const StudentParams& student, const LatentCodec& codec,
                                    const std::vector<PredictionTask>& tasks, const NoiseSchedule& sched,
                                    const ConsistencyConfig& cfg, std::size_t k, std::uint64_t seed) {
  return [&student, &codec, &tasks, &sched, &cfg, k, seed](std::size_t i, std::int64_t& evals) {
    EvalCounter counter;
    auto out = multi_sample(student, codec, codec.encode_condition(tasks[i].history), sched, cfg, k,
                            item_noise_seed(seed, i), &counter);
    evals += counter.count;
    return out;
  };
}

}  // namespace humancm
