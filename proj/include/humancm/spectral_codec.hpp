#pragma once

// Orthonormal DCT-II basis and per-channel forward / inverse / truncated
// transforms of (frames x channels) motion arrays.

#include <numbers>

#include "humancm/common.hpp"

namespace humancm {

struct DctBasis {
  Eigen::Index n = 0;
  Matrix matrix;  // n x n, rows are frequencies, D * D^T = I
};

/// Truncated spectral coefficients: the first `rows()` frequencies of every channel.
struct SpectralCoeffs {
  Matrix coeffs;  // l x channels

  Eigen::Index l() const { return coeffs.rows(); }
  Eigen::Index channels() const { return coeffs.cols(); }
};

inline DctBasis build_dct_basis(Eigen::Index n) {
  require(n >= 1, "build_dct_basis: frame count must be >= 1");
  DctBasis basis{n, Matrix(n, n)};
  const double nd = static_cast<double>(n);
  const double dc = std::sqrt(1.0 / nd);
  const double ac = std::sqrt(2.0 / nd);
  for (Eigen::Index k = 0; k < n; ++k) {
    for (Eigen::Index m = 0; m < n; ++m) {
      if (k == 0) {
        basis.matrix(k, m) = dc;
      } else {
        basis.matrix(k, m) =
            ac * std::cos(std::numbers::pi * (2.0 * static_cast<double>(m) + 1.0) *
                          static_cast<double>(k) / (2.0 * nd));
      }
    }
  }
  return basis;
}

/// First `l` rows of D * x.
inline SpectralCoeffs dct_forward(const Matrix& x, const DctBasis& basis, Eigen::Index l) {
  require(x.rows() == basis.n, "dct_forward: frame count " + std::to_string(x.rows()) +
                                   " does not match basis size " + std::to_string(basis.n));
  require(l >= 1 && l <= basis.n, "dct_forward: retained count must be in [1, n]");
  return SpectralCoeffs{basis.matrix.topRows(l) * x};
}

/// D_L^T * y, producing basis.n frames.
inline Matrix dct_inverse(const SpectralCoeffs& y, const DctBasis& basis) {
  require(y.l() >= 1 && y.l() <= basis.n, "dct_inverse: retained count " +
                                              std::to_string(y.l()) + " exceeds basis size " +
                                              std::to_string(basis.n));
  return basis.matrix.topRows(y.l()).transpose() * y.coeffs;
}

/// Share of squared coefficient mass held by the first `low` frequency rows.
inline double low_frequency_energy_fraction(const Matrix& x, const DctBasis& basis,
                                            Eigen::Index low) {
  const Matrix full = dct_forward(x, basis, basis.n).coeffs;
  const double total = full.squaredNorm();
  if (total == 0.0) return 1.0;
  return full.topRows(low).squaredNorm() / total;
}

}  // namespace humancm
