#pragma once

// Latent encoder / decoder: truncated DCT of the whole H+F window followed by
// per-(row, channel) standardisation with training-set statistics. The
// condition latent is the truncated DCT of the last-frame-padded history,
// standardised with its own statistics.

#include <vector>

#include "humancm/motion_data.hpp"
#include "humancm/spectral_codec.hpp"

namespace humancm {

struct LatentCodec {
  int history = 0;
  int future = 0;
  int keep = 0;  // retained frequency rows
  DctBasis basis;
  Matrix y_mean, y_std;  // keep x channels
  Matrix c_mean, c_std;

  static constexpr double kMinStd = 1e-6;

  bool has_statistics() const { return y_mean.size() != 0 && c_mean.size() != 0; }

  Eigen::Index channels() const { return y_mean.cols(); }

  void check_ready() const {
    if (!has_statistics()) throw InvalidState("LatentCodec: normalization statistics are missing");
  }

  Matrix encode_target(const PredictionTask& task) const {
    check_ready();
    const Matrix raw = dct_forward(task.full().coords, basis, keep).coeffs;
    return ((raw - y_mean).array() / y_std.array()).matrix();
  }

  Matrix encode_condition(const MotionSequence& hist) const {
    check_ready();
    const Matrix raw = build_condition(hist, future, basis, keep).coeffs;
    return ((raw - c_mean).array() / c_std.array()).matrix();
  }

  /// Standardised latent -> H+F frames.
  Matrix decode(const Matrix& latent) const {
    check_ready();
    require(latent.rows() == keep && latent.cols() == channels(), "LatentCodec::decode: shape mismatch");
    const Matrix raw = (latent.array() * y_std.array()).matrix() + y_mean;
    return dct_inverse(SpectralCoeffs{raw}, basis);
  }

  /// Standardised latent -> the F predicted frames.
  Matrix decode_future(const Matrix& latent) const { return decode(latent).bottomRows(future); }
};

inline LatentCodec make_latent_codec(int history, int future, int keep) {
  require(history >= 1 && future >= 1, "LatentCodec: H and F must be >= 1");
  require(keep >= 1 && keep <= history + future, "codec.keep must be in [1, H+F]");
  LatentCodec codec;
  codec.history = history;
  codec.future = future;
  codec.keep = keep;
  codec.basis = build_dct_basis(history + future);
  return codec;
}

namespace detail {

inline void mean_std(const std::vector<Matrix>& xs, Matrix& mean, Matrix& stdev) {
  mean = Matrix::Zero(xs.front().rows(), xs.front().cols());
  for (const auto& x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  Matrix var = Matrix::Zero(mean.rows(), mean.cols());
  for (const auto& x : xs) var.array() += (x - mean).array().square();
  var /= static_cast<double>(xs.size());
  stdev = var.array().sqrt().max(LatentCodec::kMinStd).matrix();
}

}  // namespace detail

inline LatentCodec fit_latent_codec(const std::vector<PredictionTask>& train, int keep) {
  require(!train.empty(), "fit_latent_codec: empty training set");
  LatentCodec codec = make_latent_codec(static_cast<int>(train.front().history_frames()),
                                        static_cast<int>(train.front().future_frames()), keep);
  std::vector<Matrix> ys, cs;
  ys.reserve(train.size());
  cs.reserve(train.size());
  for (const auto& t : train) {
    require(t.history_frames() == codec.history && t.future_frames() == codec.future,
            "fit_latent_codec: tasks disagree in H or F");
    ys.push_back(dct_forward(t.full().coords, codec.basis, keep).coeffs);
    cs.push_back(build_condition(t.history, codec.future, codec.basis, keep).coeffs);
  }
  detail::mean_std(ys, codec.y_mean, codec.y_std);
  detail::mean_std(cs, codec.c_mean, codec.c_std);
  return codec;
}

/// Standardised (target, condition) latent pairs.
struct LatentDataset {
  std::vector<Matrix> targets;
  std::vector<Matrix> conditions;

  std::size_t size() const { return targets.size(); }
};

inline LatentDataset encode_dataset(const LatentCodec& codec,
                                    const std::vector<PredictionTask>& tasks) {
  LatentDataset out;
  for (const auto& t : tasks) {
    out.targets.push_back(codec.encode_target(t));
    out.conditions.push_back(codec.encode_condition(t.history));
  }
  return out;
}

}  // namespace humancm
