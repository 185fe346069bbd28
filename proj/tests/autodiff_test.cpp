#include <gtest/gtest.h>

#include <functional>

#include "humancm/denoiser.hpp"

using namespace humancm;
using ad::Tape;
using ad::Var;

namespace {

using LossFn = std::function<Var(Tape&, const std::vector<Var>&)>;

double eval_loss(const std::vector<Matrix>& params, const LossFn& fn) {
  Tape tape(false);
  std::vector<Var> leaves;
  for (std::size_t i = 0; i < params.size(); ++i) leaves.push_back(tape.parameter(params[i], static_cast<int>(i)));
  return tape.value(fn(tape, leaves))(0, 0);
}

// Largest per-group relative deviation between reverse-mode and central
// finite-difference gradients.
double max_relative_error(std::vector<Matrix> params, const LossFn& fn, double h = 1e-5,
                          std::vector<std::string>* report = nullptr) {
  const auto [value, grads] = ad::value_and_grad(params, fn);
  // Roundoff floor of the central difference. A group whose exact gradient
  // vanishes has no relative error; both estimates must sit below the floor.
  const double floor = 100.0 * std::numeric_limits<double>::epsilon() * std::max(std::abs(value), 1.0) / h;
  double worst = 0.0;
  for (std::size_t g = 0; g < params.size(); ++g) {
    Matrix fd(params[g].rows(), params[g].cols());
    for (Eigen::Index i = 0; i < params[g].size(); ++i) {
      const double keep = params[g].data()[i];
      params[g].data()[i] = keep + h;
      const double up = eval_loss(params, fn);
      params[g].data()[i] = keep - h;
      const double down = eval_loss(params, fn);
      params[g].data()[i] = keep;
      fd.data()[i] = (up - down) / (2.0 * h);
    }
    const double fd_max = fd.cwiseAbs().maxCoeff();
    const bool vanishing = fd_max <= floor && grads[g].cwiseAbs().maxCoeff() <= floor;
    const double err = vanishing ? 0.0 : (grads[g] - fd).cwiseAbs().maxCoeff() / std::max(fd_max, 1e-8);
    if (report != nullptr)
      report->push_back(std::to_string(g) + ": " + (vanishing ? "zero gradient" : std::to_string(err)));
    worst = std::max(worst, err);
  }
  return worst;
}

Matrix rnd(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return scale * standard_normal(r, c, rng);
}

}  // namespace

TEST(Tape, SumOfSquaresGradient) {
  const std::vector<Matrix> p{rnd(3, 4, 1)};
  const auto [v, g] = ad::value_and_grad(p, [](Tape& t, const std::vector<Var>& l) { return t.sum_squares(l[0]); });
  EXPECT_NEAR(v, p[0].squaredNorm(), 1e-12);
  EXPECT_LE((g[0] - 2.0 * p[0]).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Tape, ConstantLossHasZeroGradient) {
  const std::vector<Matrix> p{rnd(2, 2, 2)};
  const auto [v, g] = ad::value_and_grad(p, [](Tape& t, const std::vector<Var>&) {
    return t.sum_squares(t.constant(Matrix::Ones(1, 1)));
  });
  EXPECT_DOUBLE_EQ(v, 1.0);
  EXPECT_EQ(g[0], Matrix::Zero(2, 2));
}

TEST(Tape, NonFiniteLossRaises) {
  const std::vector<Matrix> p{Matrix::Constant(1, 1, std::numeric_limits<double>::infinity())};
  EXPECT_THROW(ad::value_and_grad(p, [](Tape& t, const std::vector<Var>& l) { return t.sum_squares(l[0]); }),
               NumericalError);
}

TEST(Tape, LinearAndActivations) {
  const std::vector<Matrix> p{rnd(6, 4, 3), rnd(4, 5, 4), rnd(1, 5, 5)};
  const LossFn fn = [](Tape& t, const std::vector<Var>& l) {
    const Var h = t.linear(l[0], l[1], l[2]);
    return t.sum_squares(t.add(t.gelu(h), t.silu(h)));
  };
  EXPECT_LE(max_relative_error(p, fn), 1e-6);
}

TEST(Tape, LayerNorm) {
  const std::vector<Matrix> p{rnd(5, 6, 6), rnd(1, 6, 7), rnd(1, 6, 8)};
  const Matrix target = rnd(5, 6, 9);
  const LossFn fn = [&](Tape& t, const std::vector<Var>& l) {
    return t.distance(t.layer_norm(l[0], l[1], l[2]), target, {1.0}, ad::Distance::SquaredL2);
  };
  EXPECT_LE(max_relative_error(p, fn), 1e-6);
}

TEST(Tape, Attention) {
  const Eigen::Index seq = 4, batch = 2, dim = 6;
  const std::vector<Matrix> p{rnd(seq * batch, dim, 10), rnd(seq * batch, dim, 11), rnd(seq * batch, dim, 12)};
  const Matrix target = rnd(seq * batch, dim, 13);
  const LossFn fn = [&](Tape& t, const std::vector<Var>& l) {
    return t.distance(t.attention(l[0], l[1], l[2], seq, 3), target, {0.5, 0.5}, ad::Distance::SquaredL2);
  };
  EXPECT_LE(max_relative_error(p, fn), 1e-6);
}

TEST(Tape, AttentionMatchesDirectSoftmax) {
  const Eigen::Index seq = 3, dim = 4;
  const Matrix q = rnd(seq, dim, 20), k = rnd(seq, dim, 21), v = rnd(seq, dim, 22);
  Tape tape(false);
  const Matrix out = tape.value(tape.attention(tape.constant(q), tape.constant(k), tape.constant(v), seq, 2));
  for (int h = 0; h < 2; ++h) {
    const Matrix qh = q.middleCols(2 * h, 2), kh = k.middleCols(2 * h, 2), vh = v.middleCols(2 * h, 2);
    Matrix s = qh * kh.transpose() / std::sqrt(2.0);
    for (Eigen::Index r = 0; r < seq; ++r) {
      s.row(r) = (s.row(r).array() - s.row(r).maxCoeff()).exp();
      s.row(r) /= s.row(r).sum();
    }
    EXPECT_LE((out.middleCols(2 * h, 2) - s * vh).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Tape, RowPlumbing) {
  const std::vector<Matrix> p{rnd(6, 3, 30), rnd(3, 3, 31), rnd(2, 3, 32), rnd(1, 3, 33)};
  const LossFn fn = [](Tape& t, const std::vector<Var>& l) {
    Var a = t.add_tiled(l[0], l[1]);                        // 6 rows, period 3
    a = t.add_grouped(a, l[2], 3);                          // one row per group of 3
    a = t.add_tiled(a, t.gather_rows(l[3], {0, 0, 0}));     // broadcast a single row
    Var lead = t.take_leading_rows(a, 3, 2);                // 2 rows from each group
    lead = t.scale_shift_groups(lead, {0.5, -2.0}, Matrix::Ones(4, 3));
    return t.sum_squares(lead);
  };
  EXPECT_LE(max_relative_error(p, fn), 1e-6);
}

TEST(Tape, AssembleTokensRoutesGradientToFillOnly) {
  const Matrix lead = rnd(4, 2, 40), tail = rnd(4, 2, 41);
  const std::vector<Matrix> p{rnd(1, 2, 42)};
  const LossFn fn = [&](Tape& t, const std::vector<Var>& l) {
    return t.sum_squares(t.assemble_tokens(lead, 2, tail, 2, {false, true}, l[0]));
  };
  EXPECT_LE(max_relative_error(p, fn), 1e-6);
  Tape tape(false);
  const Matrix out = tape.value(tape.assemble_tokens(lead, 2, tail, 2, {false, true}, tape.constant(p[0])));
  EXPECT_EQ(out.topRows(2), lead.topRows(2));
  EXPECT_EQ(out.middleRows(2, 2), tail.topRows(2));
  EXPECT_EQ(out.middleRows(4, 2), lead.bottomRows(2));
  EXPECT_EQ(out.row(6), p[0]);
  EXPECT_EQ(out.row(7), p[0]);
}

TEST(Tape, Distances) {
  const std::vector<Matrix> p{rnd(4, 3, 50)};
  const Matrix target = rnd(4, 3, 51);
  for (auto kind : {ad::Distance::SquaredL2, ad::Distance::PseudoHuber}) {
    const LossFn fn = [&](Tape& t, const std::vector<Var>& l) { return t.distance(l[0], target, {0.3, 0.7}, kind, 0.1); };
    EXPECT_LE(max_relative_error(p, fn), 1e-6);
  }
  Tape tape(false);
  const Matrix d = p[0] - target;
  const double l2 = tape.value(tape.distance(tape.constant(p[0]), target, {0.3, 0.7}, ad::Distance::SquaredL2))(0, 0);
  EXPECT_NEAR(l2, 0.3 * d.topRows(2).squaredNorm() / 6.0 + 0.7 * d.bottomRows(2).squaredNorm() / 6.0, 1e-14);
  const double ph = tape.value(tape.distance(tape.constant(p[0]), target, {1.0, 0.0}, ad::Distance::PseudoHuber, 0.1))(0, 0);
  EXPECT_NEAR(ph, std::sqrt(d.topRows(2).squaredNorm() + 0.01) - 0.1, 1e-14);
}

TEST(DenoiserGradient, FiniteDifferenceEveryGroupAtDim8) {
  ArchConfig arch;
  arch.model_dim = 8;
  arch.n_heads = 2;
  arch.latent_rows = 4;
  arch.condition_rows = 4;
  arch.channel_dim = 3;
  arch.seed = 5;
  DenoiserParams p = init_params(arch);
  // Random values everywhere so no group sits behind a zero projection.
  for (std::size_t i = 0; i < p.arrays.size(); ++i)
    p.arrays[i] = rnd(p.arrays[i].rows(), p.arrays[i].cols(), 100 + i, 0.5);

  DenoiserBatch b;
  b.latents = rnd(3 * 4, 3, 200);
  b.conditions = rnd(3 * 4, 3, 201);
  b.null_condition = {false, true, false};
  b.timesteps = {3, 57, 99};
  b.guidance = {0.0, 0.4, 1.0 / 125.0};
  const Matrix target = rnd(3 * 4, 3, 202);
  const LossFn fn = [&](Tape& t, const std::vector<Var>& l) {
    return t.distance(denoiser_forward(t, p, l, b), target, {1.0 / 3, 1.0 / 3, 1.0 / 3}, ad::Distance::SquaredL2);
  };
  std::vector<std::string> report;
  const double err = max_relative_error(p.arrays, fn, 1e-5, &report);
  EXPECT_LE(err, 1e-4);
  if (err > 1e-4)
    for (const auto& r : report) ADD_FAILURE() << r;
}
