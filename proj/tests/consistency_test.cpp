#include <gtest/gtest.h>

#include "humancm/consistency.hpp"

using namespace humancm;

namespace {

Matrix rnd(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return scale * standard_normal(r, c, rng);
}

ArchConfig tiny_arch(std::uint64_t seed = 1) {
  ArchConfig a;
  a.model_dim = 8;
  a.n_blocks = 1;
  a.n_heads = 2;
  a.latent_rows = 4;
  a.condition_rows = 4;
  a.channel_dim = 3;
  a.seed = seed;
  return a;
}

DenoiserParams random_net(const ArchConfig& a, std::uint64_t seed) {
  DenoiserParams p = init_params(a);
  for (std::size_t i = 0; i < p.arrays.size(); ++i)
    p.arrays[i] = rnd(p.arrays[i].rows(), p.arrays[i].cols(), seed + i, 0.4);
  return p;
}

// Network whose output is the constant `value` everywhere.
DenoiserParams constant_net(const ArchConfig& a, double value) {
  DenoiserParams p = init_params(a);
  for (auto& m : p.arrays) m.setZero();
  p["out_proj.bias"].setConstant(value);
  return p;
}

LatentDataset toy_data(int n) {
  LatentDataset d;
  for (int i = 0; i < n; ++i) {
    const Matrix c = rnd(4, 3, 500 + i);
    d.conditions.push_back(c);
    d.targets.push_back(0.7 * c + 0.2 * rnd(4, 3, 600 + i));
  }
  return d;
}

DenoiserBatch batch_of(const Matrix& y, std::vector<double> t, std::vector<double> w, const Matrix& c) {
  DenoiserBatch b;
  b.latents = y;
  b.conditions = c;
  b.null_condition.assign(t.size(), false);
  b.timesteps = std::move(t);
  b.guidance = std::move(w);
  return b;
}

}  // namespace

TEST(BoundaryCoeffs, Values) {
  const auto s2 = build_schedule(2, 0.01, 0.1);
  const auto c0 = boundary_coeffs(0, s2, 0.5);
  EXPECT_EQ(c0.skip, 1.0);
  EXPECT_EQ(c0.out, 0.0);
  const auto c1 = boundary_coeffs(1, s2, 0.5);
  EXPECT_NEAR(c1.skip, 0.5, 1e-15);
  EXPECT_NEAR(c1.out, 0.35355339, 1e-8);
  EXPECT_THROW(boundary_coeffs(3, s2, 0.5), InvalidArgument);
}

TEST(ConsistencyForward, BoundaryIsIdentityForAnyWeights) {
  const auto s = build_schedule(100, 1e-3, 0.2);
  const ArchConfig a = tiny_arch();
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto p = random_net(a, 10 * seed);
    const Matrix y = rnd(8, 3, seed), c = rnd(8, 3, seed + 50);
    const Matrix f = consistency_forward(p, batch_of(y, {0, 0}, {0.3, 1.0 / 125}, c), s, 0.5);
    EXPECT_LE((f - y).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(ConsistencyForward, ScalarCombination) {
  const auto s2 = build_schedule(2, 0.01, 0.1);
  const ArchConfig a = tiny_arch();
  const auto p = constant_net(a, 1.0);
  const Matrix y = Matrix::Constant(4, 3, 2.0), c = rnd(4, 3, 1);
  EvalCounter counter;
  const Matrix f = consistency_forward(p, batch_of(y, {1}, {0.0}, c), s2, 0.5, &counter);
  EXPECT_EQ(counter.count, 1);
  EXPECT_LE((f - Matrix::Constant(4, 3, 1.35355339)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(CfgTarget, CollapsesAtZeroGuidance) {
  const auto s = build_schedule(100, 1e-3, 0.2);
  const ArchConfig a = tiny_arch();
  const auto teacher = random_net(a, 70);
  const Matrix y = rnd(4, 3, 2), c = rnd(4, 3, 3);
  const Matrix guided = cfg_teacher_target(y, 40, 30, teacher, c, 0.0, s);
  EXPECT_LE((guided - ddim_step(y, 40, 30, teacher, &c, s)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(CfgTarget, EqualBranchesCollapse) {
  const auto s = build_schedule(100, 1e-3, 0.2);
  const ArchConfig a = tiny_arch();
  const auto teacher = random_net(a, 70);
  const Matrix y = rnd(4, 3, 2);
  const Matrix c = teacher["null_token"].replicate(4, 1);
  const Matrix plain = ddim_step(y, 40, 30, teacher, &c, s);
  for (double w : {0.0, 0.3, 1.0, 7.5})
    EXPECT_LE((cfg_teacher_target(y, 40, 30, teacher, c, w, s) - plain).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(CfgTarget, GuidedBlend) {
  const auto s = build_schedule(100, 1e-3, 0.2);
  const ArchConfig a = tiny_arch();
  const auto teacher = random_net(a, 70);
  const Matrix y = rnd(4, 3, 2), c = rnd(4, 3, 3);
  const Matrix phi_c = ddim_step(y, 40, 30, teacher, &c, s);
  const Matrix phi_null = ddim_step(y, 40, 30, teacher, nullptr, s);
  EvalCounter counter;
  const Matrix guided = cfg_teacher_target(y, 40, 30, teacher, c, 0.5, s, &counter);
  EXPECT_EQ(counter.count, 2);
  EXPECT_LE((guided - (1.5 * phi_c - 0.5 * phi_null)).cwiseAbs().maxCoeff(), 1e-12);
  // The scalar form of the same blend.
  EXPECT_DOUBLE_EQ(1.5 * 2.0 - 0.5 * 1.0, 2.5);
}

TEST(DistillationLoss, ScalarCombination) {
  ad::Tape tape(false);
  Matrix f(2, 1), goal(2, 1);
  f << 1.0, 2.0;     // online output, reconstruction output
  goal << 0.5, 1.0;  // target output, y_0
  const double loss = tape.value(tape.distance(tape.constant(f), goal, {1.0, 1.0 / 15.0}, ad::Distance::SquaredL2))(0, 0);
  EXPECT_NEAR(loss, 0.31666667, 1e-8);
}

TEST(DistillationLoss, MatchesHandComputationWithConstantNetworks) {
  const auto s = build_schedule(100, 1e-3, 0.2);
  const ArchConfig a = tiny_arch();
  const auto data = toy_data(4);
  ConsistencyConfig cfg;
  Rng rng(5);
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  const auto draw = draw_distill_batch(data, idx.data(), 4, cfg, s, rng);
  const auto teacher = random_net(a, 90);
  const auto online = constant_net(a, 0.7);
  const auto target = constant_net(a, -0.2);
  const auto targets = distill_targets(draw, teacher, target, cfg, s);

  double expected = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto r = static_cast<Eigen::Index>(4 * i);
    const auto co = boundary_coeffs(draw.n[i] + draw.k[i], s, 0.5);
    const auto ct = boundary_coeffs(draw.n[i], s, 0.5);
    const auto cm = boundary_coeffs(draw.m[i], s, 0.5);
    const Matrix f_on = co.skip * draw.noisy.middleRows(r, 4) + Matrix::Constant(4, 3, co.out * 0.7);
    const Matrix f_tg = ct.skip * targets.teacher_estimate.middleRows(r, 4) + Matrix::Constant(4, 3, ct.out * -0.2);
    const Matrix f_rc = cm.skip * draw.recon_noisy.middleRows(r, 4) + Matrix::Constant(4, 3, cm.out * 0.7);
    EXPECT_LE((targets.target_output.middleRows(r, 4) - f_tg).cwiseAbs().maxCoeff(), 1e-12);
    expected += (f_on - f_tg).squaredNorm() / 12.0 / 4.0;
    expected += cfg.lambda * (f_rc - draw.clean.middleRows(r, 4)).squaredNorm() / 12.0 / 4.0;
  }
  const auto [loss, grads] = distillation_loss_and_grad(online, draw, targets, cfg, s);
  EXPECT_NEAR(loss, expected, 1e-12);

  ConsistencyConfig no_recon = cfg;
  no_recon.lambda = 0.0;
  const auto [pure, g2] = distillation_loss_and_grad(online, draw, targets, no_recon, s);
  double consistency_only = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto r = static_cast<Eigen::Index>(4 * i);
    const auto co = boundary_coeffs(draw.n[i] + draw.k[i], s, 0.5);
    const Matrix f_on = co.skip * draw.noisy.middleRows(r, 4) + Matrix::Constant(4, 3, co.out * 0.7);
    consistency_only += (f_on - targets.target_output.middleRows(r, 4)).squaredNorm() / 12.0 / 4.0;
  }
  EXPECT_NEAR(pure, consistency_only, 1e-12);
}

TEST(DistillationLoss, ZeroWhenEverythingCoincides) {
  const auto s = build_schedule(100, 1e-3, 0.2);
  const ArchConfig a = tiny_arch();
  const auto data = toy_data(2);
  ConsistencyConfig cfg;
  Rng rng(6);
  const std::vector<std::size_t> idx{0, 1};
  const auto draw = draw_distill_batch(data, idx.data(), 2, cfg, s, rng);
  const auto online = random_net(a, 30);
  DistillTargets t;
  t.target_output = consistency_forward(online, online_batch(draw, cfg), s, 0.5).topRows(draw.noisy.rows());
  ConsistencyConfig no_recon = cfg;
  no_recon.lambda = 0.0;
  const auto [loss, grads] = distillation_loss_and_grad(online, draw, t, no_recon, s);
  EXPECT_EQ(loss, 0.0);
}

TEST(DistillationLoss, GradientFlowsOnlyThroughOnlineBranch) {
  const auto s = build_schedule(100, 1e-3, 0.2);
  const ArchConfig a = tiny_arch();
  const auto data = toy_data(3);
  ConsistencyConfig cfg;
  Rng rng(7);
  const std::vector<std::size_t> idx{0, 1, 2};
  const auto draw = draw_distill_batch(data, idx.data(), 3, cfg, s, rng);
  const auto teacher = random_net(a, 40);
  const auto theta = random_net(a, 41);  // online and target share parameters

  const auto targets = distill_targets(draw, teacher, theta, cfg, s);
  const auto [loss, grads] = distillation_loss_and_grad(theta, draw, targets, cfg, s);

  // The teacher moves the loss value but never enters the gradient graph.
  auto teacher2 = teacher;
  teacher2["out_proj.bias"].array() += 0.05;
  const auto targets2 = distill_targets(draw, teacher2, theta, cfg, s);
  EXPECT_NE(distillation_loss_and_grad(theta, draw, targets2, cfg, s).first, loss);

  const auto loss_at = [&](const DenoiserParams& p, bool live) {
    const DistillTargets t = live ? distill_targets(draw, teacher, p, cfg, s) : targets;
    ad::Tape tape(false);
    return tape.value(distillation_loss(tape, p, bind_parameters(tape, p), draw, t, cfg, s))(0, 0);
  };
  const double h = 1e-5;
  double frozen_err = 0.0, live_gap = 0.0;
  for (std::uint64_t dir = 0; dir < 3; ++dir) {
    DenoiserParams up = theta, down = theta;
    double analytic = 0.0;
    for (std::size_t i = 0; i < theta.arrays.size(); ++i) {
      const Matrix v = rnd(theta.arrays[i].rows(), theta.arrays[i].cols(), 1000 + 31 * dir + i);
      up.arrays[i] += h * v;
      down.arrays[i] -= h * v;
      analytic += grads[i].cwiseProduct(v).sum();
    }
    const double frozen = (loss_at(up, false) - loss_at(down, false)) / (2 * h);
    const double live = (loss_at(up, true) - loss_at(down, true)) / (2 * h);
    frozen_err = std::max(frozen_err, std::abs(frozen - analytic) / std::max(std::abs(analytic), 1e-8));
    live_gap = std::max(live_gap, std::abs(live - analytic) / std::max(std::abs(analytic), 1e-8));
  }
  EXPECT_LE(frozen_err, 1e-5);
  EXPECT_GT(live_gap, 1e-3);
}

TEST(TrainConsistency, FirstIterationEmaBlend) {
  const auto s = build_schedule(50, 1e-3, 0.2);
  const ArchConfig a = tiny_arch(4);
  const auto data = toy_data(8);
  const auto teacher = random_net(a, 60);
  ConsistencyConfig cfg;
  cfg.k = 5;
  cfg.batch = 4;
  cfg.epochs = 1;
  const auto r = train_consistency(data, teacher, a, cfg, s, 1);
  const auto init = init_params(a);
  for (std::size_t i = 0; i < init.arrays.size(); ++i) {
    const Matrix blend = 0.95 * init.arrays[i] + (1.0 - 0.95) * r.params.online.arrays[i];
    EXPECT_EQ(r.params.target.arrays[i], blend) << i;
  }
  EXPECT_NE(r.params.online.arrays, init.arrays);
}

TEST(TrainConsistency, SeededAndFinite) {
  const auto s = build_schedule(50, 1e-3, 0.2);
  const ArchConfig a = tiny_arch();
  const auto data = toy_data(8);
  const auto teacher = random_net(a, 60);
  ConsistencyConfig cfg;
  cfg.k = 5;
  cfg.batch = 4;
  cfg.epochs = 3;
  const auto r1 = train_consistency(data, teacher, a, cfg, s);
  const auto r2 = train_consistency(data, teacher, a, cfg, s);
  ASSERT_EQ(r1.history.epochs.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(r1.history.epochs[i].loss, r2.history.epochs[i].loss);
    EXPECT_TRUE(std::isfinite(r1.history.epochs[i].loss));
  }
  EXPECT_EQ(r1.params.target.arrays, r2.params.target.arrays);
  EXPECT_EQ(r1.history.initial_loss, r1.history.epochs[0].loss);
}

TEST(TrainConsistency, ArchitectureMismatchRejected) {
  const auto s = build_schedule(50, 1e-3, 0.2);
  ArchConfig other = tiny_arch();
  other.model_dim = 16;
  const auto teacher = random_net(tiny_arch(), 60);
  ConsistencyConfig cfg;
  cfg.k = 5;
  EXPECT_THROW(train_consistency(toy_data(4), teacher, other, cfg, s), ArtifactMismatch);
  ArchConfig reseeded = tiny_arch(99);
  EXPECT_NO_THROW(train_consistency(toy_data(4), teacher, reseeded, cfg, s, 1));
}

TEST(ConsistencyConfig, Validation) {
  const auto s = build_schedule(20, 1e-3, 0.2);
  ConsistencyConfig c;
  EXPECT_NO_THROW(c.validate(s));
  c.k = 20;
  EXPECT_THROW(c.validate(s), InvalidArgument);
  c = {};
  c.w_min = 2.0;
  EXPECT_THROW(c.validate(s), InvalidArgument);
  c = {};
  c.rho = 1.1;
  EXPECT_THROW(c.validate(s), InvalidArgument);
}

class Sampling : public ::testing::Test {
 protected:
  void SetUp() override {
    SyntheticConfig sc;
    sc.joints = 1;
    sc.history = 3;
    sc.future = 5;
    sc.n_sequences = 12;
    tasks = generate_synthetic_dataset(sc);
    codec = fit_latent_codec(tasks, 4);
    student.online = random_net(tiny_arch(), 300);
    student.target = random_net(tiny_arch(), 400);
    cond = codec.encode_condition(tasks[0].history);
  }
  std::vector<PredictionTask> tasks;
  LatentCodec codec;
  StudentParams student;
  Matrix cond;
  NoiseSchedule sched = build_schedule(100, 1e-3, 0.2);
  ConsistencyConfig cfg;
};

TEST_F(Sampling, OneStepIsOneEvaluationAndMatchesUnrolledOracle) {
  EvalCounter counter;
  const Matrix out = one_step_sample(student, codec, cond, sched, cfg, 42, &counter);
  EXPECT_EQ(counter.count, 1);
  EXPECT_EQ(out.rows(), 5);
  EXPECT_EQ(out.cols(), 3);

  Rng rng = derive_rng(42, 0);
  const Matrix y_t = standard_normal(4, 3, rng);
  const auto c = boundary_coeffs(100, sched, cfg.sigma_data);
  const Matrix net = denoiser_forward(student.target, single_batch(y_t, 100, cfg.w_star, &cond, tiny_arch()));
  const Matrix y0 = c.skip * y_t + c.out * net;
  const Matrix raw = (y0.array() * codec.y_std.array()).matrix() + codec.y_mean;
  const Matrix frames = codec.basis.matrix.topRows(4).transpose() * raw;
  EXPECT_LE((out - frames.bottomRows(5)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST_F(Sampling, OnlineParametersWhenEmaDisabled) {
  ConsistencyConfig no_ema = cfg;
  no_ema.use_ema = false;
  StudentParams swapped{student.online, student.online};
  EXPECT_EQ(one_step_sample(student, codec, cond, sched, no_ema, 42),
            one_step_sample(swapped, codec, cond, sched, cfg, 42));
}

TEST_F(Sampling, MultiSampleCountsAndDiversity) {
  EvalCounter counter;
  const auto out = multi_sample(student, codec, cond, sched, cfg, 50, 9, &counter);
  EXPECT_EQ(counter.count, 50);
  ASSERT_EQ(out.size(), 50u);
  double min_gap = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t j = i + 1; j < out.size(); ++j) min_gap = std::min(min_gap, (out[i] - out[j]).cwiseAbs().maxCoeff());
  EXPECT_GT(min_gap, 0.0);
  EXPECT_EQ(multi_sample(student, codec, cond, sched, cfg, 1, 9).front(), one_step_sample(student, codec, cond, sched, cfg, 9));
  EXPECT_THROW(multi_sample(student, codec, cond, sched, cfg, 0, 9), InvalidArgument);
}

TEST_F(Sampling, MissingStatisticsIsInvalidState) {
  const auto bare = make_latent_codec(3, 5, 4);
  EXPECT_THROW(one_step_sample(student, bare, cond, sched, cfg, 1), InvalidState);
}

TEST_F(Sampling, SelfConsistencyGapIsDeterministicAndNonNegative) {
  std::vector<Matrix> conds;
  for (int i = 0; i < 3; ++i) conds.push_back(codec.encode_condition(tasks[i].history));
  const auto teacher = random_net(tiny_arch(), 500);
  const double g1 = self_consistency_gap(student.target, teacher, conds, sched, cfg, 5, 3);
  const double g2 = self_consistency_gap(student.target, teacher, conds, sched, cfg, 5, 3);
  EXPECT_EQ(g1, g2);
  EXPECT_GT(g1, 0.0);
}
