#include <gtest/gtest.h>

#include <cmath>

#include "aetta/tta.hpp"

using namespace aetta;
using namespace aetta::tta;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double shift = 0.0) {
  Rng rng(seed);
  std::normal_distribution<double> nd(shift, 1.0);
  Matrix m(r, c);
  for (double& v : m.data()) v = nd(rng);
  return m;
}

nn::MlpModel bn_model(std::uint64_t seed, std::vector<std::size_t> hidden = {16, 16}) {
  nn::Architecture a;
  a.input_dim = 6;
  a.hidden = std::move(hidden);
  a.class_count = 4;
  return nn::make_model(a, seed);
}

bool dense_params_equal(const nn::MlpModel& a, const nn::MlpModel& b) {
  return a.hidden == b.hidden && a.head == b.head;
}

est::EstimatorState history_of(std::initializer_list<double> values) {
  est::EstimatorState s(10);
  for (double v : values) s.push_accuracy(v);
  return s;
}

RecoveryPolicy aetta_policy() {
  RecoveryPolicy p;
  p.kind = RecoveryKind::AettaReset;
  return p;
}

}  // namespace

TEST(Tent, ZeroLearningRateOnlyRefreshesRunningStats) {
  auto m = bn_model(1);
  auto opt = nn::make_optimizer(nn::OptimizerKind::Adam, 0.0);
  const auto before = m;
  tent_step(m, opt, random_matrix(32, 6, 2, 0.5));
  for (std::size_t i = 0; i < m.norms.size(); ++i) {
    EXPECT_EQ(m.norms[i].gamma, before.norms[i].gamma);
    EXPECT_EQ(m.norms[i].beta, before.norms[i].beta);
    EXPECT_NE(m.norms[i].running_mean, before.norms[i].running_mean);
  }
  EXPECT_TRUE(dense_params_equal(m, before));
}

TEST(Tent, SmallStepsReduceEntropy) {
  int decreased = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto m = bn_model(s);
    m.bn_inference = nn::BnInference::Batch;
    auto opt = nn::make_optimizer(nn::OptimizerKind::SGD, 1e-3);
    const auto x = random_matrix(64, 6, 100 + s);
    const double before = tent_step(m, opt, x);
    const double after = nn::entropy_loss(nn::forward(m, x, nn::ForwardMode::train_bn()));
    decreased += after <= before ? 1 : 0;
  }
  EXPECT_EQ(decreased, 20);
}

TEST(Tent, NonBatchNormParametersNeverMove) {
  auto m = bn_model(3);
  const auto before = m;
  auto opt = nn::make_optimizer(nn::OptimizerKind::Adam, 0.1);
  for (std::uint64_t t = 0; t < 25; ++t) tent_step(m, opt, random_matrix(16, 6, t, 1.0));
  EXPECT_TRUE(dense_params_equal(m, before));
  EXPECT_NE(m.norms[0].gamma, before.norms[0].gamma);
}

TEST(Tent, RequiresBatchNorm) {
  nn::Architecture a;
  a.input_dim = 6;
  a.class_count = 3;
  a.batch_norm = false;
  auto m = nn::make_model(a, 0);
  auto opt = nn::make_optimizer(nn::OptimizerKind::Adam, 0.1);
  EXPECT_THROW(tent_step(m, opt, random_matrix(4, 6, 0)), ConfigError);
  EXPECT_THROW(configure_model(m, AdaptConfig{}), ConfigError);
  AdaptConfig none;
  none.method = AdaptMethod::None;
  EXPECT_NO_THROW(configure_model(m, none));
}

TEST(Tent, AdaptStepDispatch) {
  auto m = bn_model(4);
  const auto before = m;
  auto opt = nn::make_optimizer(nn::OptimizerKind::Adam, 0.1);
  AdaptConfig cfg;
  cfg.method = AdaptMethod::None;
  EXPECT_FALSE(adapt_step(m, opt, random_matrix(8, 6, 1), cfg).has_value());
  EXPECT_EQ(m, before);
  cfg.method = AdaptMethod::BnStats;
  EXPECT_TRUE(adapt_step(m, opt, random_matrix(8, 6, 1), cfg).has_value());
  EXPECT_TRUE(dense_params_equal(m, before));
  EXPECT_EQ(m.norms[0].gamma, before.norms[0].gamma);
  EXPECT_NE(m.norms[0].running_mean, before.norms[0].running_mean);
}

TEST(ShouldReset, EqualHistoryDoesNotFire) {
  auto s = history_of({0.7, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7});
  EXPECT_FALSE(should_reset(aetta_policy(), s, {}).reset);
}

TEST(ShouldReset, WindowDegradation) {
  auto s = history_of({0.9, 0.9, 0.9, 0.9, 0.9, 0.5, 0.5, 0.5, 0.5, 0.5});
  const auto d = should_reset(aetta_policy(), s, {});
  EXPECT_TRUE(d.reset);
  EXPECT_EQ(d.trigger, ResetTrigger::WindowDegradation);
}

TEST(ShouldReset, HardThresholdOnShortHistory) {
  auto s = history_of({0.8, 0.19});
  const auto d = should_reset(aetta_policy(), s, {});
  EXPECT_TRUE(d.reset);
  EXPECT_EQ(d.trigger, ResetTrigger::HardThreshold);
}

TEST(ShouldReset, WindowNeedsTenEntries) {
  // Strictly decreasing, but never long enough for a window comparison.
  for (std::size_t n = 1; n < 10; ++n) {
    est::EstimatorState s(10);
    for (std::size_t i = 0; i < n; ++i) s.push_accuracy(0.95 - 0.05 * static_cast<double>(i));
    EXPECT_FALSE(should_reset(aetta_policy(), s, {}).reset) << n;
  }
}

TEST(ShouldReset, ElementwiseComparisonIsStricter) {
  auto p = aetta_policy();
  p.comparison = WindowComparison::Elementwise;
  auto mixed = history_of({0.9, 0.9, 0.9, 0.9, 0.4, 0.5, 0.5, 0.5, 0.5, 0.5});
  EXPECT_FALSE(should_reset(p, mixed, {}).reset);
  EXPECT_TRUE(should_reset(aetta_policy(), mixed, {}).reset);
  auto all_lower = history_of({0.9, 0.9, 0.9, 0.9, 0.9, 0.5, 0.5, 0.5, 0.5, 0.5});
  EXPECT_TRUE(should_reset(p, all_lower, {}).reset);
}

TEST(ShouldReset, OtherPolicies) {
  est::EstimatorState s;
  RecoveryPolicy p;
  p.kind = RecoveryKind::Episodic;
  EXPECT_TRUE(should_reset(p, s, {}).reset);
  p.kind = RecoveryKind::MRS;
  EXPECT_FALSE(should_reset(p, s, {0, false, 0.5}).reset);
  EXPECT_FALSE(should_reset(p, s, {0, false, std::nullopt}).reset);
  EXPECT_TRUE(should_reset(p, s, {0, false, 0.1}).reset);
  p.kind = RecoveryKind::DistShift;
  EXPECT_FALSE(should_reset(p, s, {0, true, {}}).reset);
  EXPECT_TRUE(should_reset(p, s, {10, true, {}}).reset);
  EXPECT_FALSE(should_reset(p, s, {11, false, {}}).reset);
  p.kind = RecoveryKind::StochasticRestore;
  EXPECT_FALSE(should_reset(p, s, {}).reset);
  p.kind = RecoveryKind::None;
  EXPECT_FALSE(should_reset(p, history_of({0.0}), {}).reset);
}

TEST(ApplyReset, RestoresCheckpointAndOptimizer) {
  const auto ckpt = bn_model(5);
  auto m = ckpt;
  auto opt = nn::make_optimizer(nn::OptimizerKind::Adam, 0.05);
  apply_reset(m, opt, ckpt);
  EXPECT_EQ(m, ckpt);

  const auto x = random_matrix(20, 6, 9);
  const auto expected = nn::forward(ckpt, x, nn::ForwardMode::deterministic());
  for (std::uint64_t t = 0; t < 10; ++t) tent_step(m, opt, random_matrix(16, 6, t, 2.0));
  EXPECT_NE(nn::forward(m, x, nn::ForwardMode::deterministic()), expected);
  apply_reset(m, opt, ckpt);
  EXPECT_EQ(nn::forward(m, x, nn::ForwardMode::deterministic()), expected);
  EXPECT_EQ(opt.step, 0u);
  EXPECT_TRUE(opt.first_moment.empty() || std::all_of(opt.first_moment.begin(), opt.first_moment.end(), [](auto& v) {
                return std::all_of(v.begin(), v.end(), [](double d) { return d == 0.0; });
              }));
  EXPECT_EQ(opt.learning_rate, 0.05);
}

TEST(ApplyReset, IdentityAfterAnyNumberOfSteps) {
  const auto ckpt = bn_model(6);
  const auto x = random_matrix(12, 6, 1);
  const auto expected = nn::forward(ckpt, x, nn::ForwardMode::deterministic());
  for (int n : {0, 1, 3, 8}) {
    auto m = ckpt;
    auto opt = nn::make_optimizer(nn::OptimizerKind::Adam, 0.5);
    for (int i = 0; i < n; ++i) tent_step(m, opt, random_matrix(16, 6, static_cast<std::uint64_t>(i), 1.0));
    apply_reset(m, opt, ckpt);
    EXPECT_EQ(nn::forward(m, x, nn::ForwardMode::deterministic()), expected) << n;
  }
}

TEST(ApplyReset, IncompatibleCheckpointThrows) {
  auto m = bn_model(1);
  auto opt = nn::make_optimizer(nn::OptimizerKind::Adam, 0.1);
  EXPECT_THROW(apply_reset(m, opt, bn_model(1, {16, 8})), ConfigError);
}

TEST(StochasticRestore, ProbabilityExtremes) {
  const auto ckpt = bn_model(2);
  auto drifted = ckpt;
  for (auto& r : nn::parameter_refs(drifted)) {
    for (double& v : r.values) v += 1.0;
  }
  auto m = drifted;
  auto res = stochastic_restore_step(m, ckpt, 0.0, 1);
  EXPECT_EQ(m, drifted);
  EXPECT_EQ(res.restored, 0u);
  res = stochastic_restore_step(m, ckpt, 1.0, 1);
  EXPECT_EQ(m, ckpt);
  EXPECT_EQ(res.restored, res.total);
  EXPECT_EQ(res.total, nn::parameter_count(ckpt));
}

TEST(StochasticRestore, BinomialCount) {
  // ~10^5 scalar parameters.
  nn::Architecture a;
  a.input_dim = 100;
  a.hidden = {400, 150};
  a.class_count = 10;
  const auto ckpt = nn::make_model(a, 0);
  auto m = ckpt;
  const auto res = stochastic_restore_step(m, ckpt, 0.01, 42);
  ASSERT_GE(res.total, 100000u);
  const double n = static_cast<double>(res.total);
  const double mean = 0.01 * n, sd = std::sqrt(n * 0.01 * 0.99);
  EXPECT_LE(std::abs(static_cast<double>(res.restored) - mean), 3.0 * sd);
}

TEST(RecoveryPolicy, Validation) {
  RecoveryPolicy p;
  p.window = 0;
  EXPECT_THROW(p.validate(), ConfigError);
  p = {};
  p.restore_prob = 1.5;
  EXPECT_THROW(p.validate(), ConfigError);
}
