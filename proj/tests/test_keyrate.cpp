#include <gtest/gtest.h>

#include "qake/keyrate.hpp"

using namespace qake;

namespace {

ExperimentModel base_model(Variant v, double loss_db = 10.0) {
  ExperimentModel m;
  m.variant = v;
  m.n_pulses = 1e10;
  m.ch = ChannelConfig::from_loss_db(loss_db, 0.02);
  return m;
}

}  // namespace

TEST(Variants, ParseAndPrint) {
  for (auto v : {Variant::qake, Variant::prng, Variant::bb84_standard, Variant::bb84_unbalanced})
    EXPECT_EQ(parse_variant(to_string(v)), v);
  EXPECT_THROW(parse_variant("bb85"), ConfigError);
  EXPECT_EQ(parse_leak_mode("formula"), LeakMode::formula);
  EXPECT_THROW(parse_leak_mode("half"), ConfigError);
}

TEST(ExpectedObservables, ZeroTransmittanceGivesNothing) {
  ExperimentModel m = base_model(Variant::qake);
  m.ch.eta = 0;
  const auto o = expected_observables(m, 0.25);
  EXPECT_EQ(o.q_sift, 0.0);
  for (int j = 0; j < 3; ++j) EXPECT_EQ(o.q_key[j] + o.q_test[j], 0.0);
}

TEST(ExpectedObservables, GeneratorVariantSkipsSifting) {
  const auto q = expected_observables(base_model(Variant::qake), 0.25);
  const auto p = expected_observables(base_model(Variant::prng), 0.25);
  EXPECT_DOUBLE_EQ(p.q_sift, 2.0 * q.q_sift);
}

TEST(ExpectedObservables, BalancedUnbalancedEqualsStandardKeySet) {
  const auto s = expected_observables(base_model(Variant::bb84_standard), 0.5);
  const auto u = expected_observables(base_model(Variant::bb84_unbalanced), 0.5, 0.5);
  for (int j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(u.q_key[j], s.q_key[j]);
}

TEST(DetectionRate, InversionHitsTarget) {
  const SourceConfig src;
  const double eta = eta_for_detection_rate(src, 0.0, 1e-4);
  double rate = 0;
  for (int j = 0; j < 3; ++j) rate += src.probs[j] * detection_prob(eta, src.mu[j]);
  EXPECT_NEAR(rate / 1e-4, 1.0, 1e-9);
  EXPECT_THROW(eta_for_detection_rate(src, 0.0, 0.9), ConfigError);
}

TEST(Optimize, TinyBlockGivesNothing) {
  ExperimentModel m = base_model(Variant::qake, 0.0);
  m.n_pulses = 1e3;
  const auto r = optimize(m);
  EXPECT_EQ(r.key_length, 0);
  EXPECT_FALSE(r.feasible);
}

TEST(Optimize, ResultReverifiesAtTargets) {
  for (auto v : {Variant::qake, Variant::prng, Variant::bb84_standard, Variant::bb84_unbalanced}) {
    const ExperimentModel m = base_model(v);
    KeyRateResult r = optimize(m);
    ASSERT_TRUE(r.feasible) << to_string(v);
    EXPECT_GT(r.key_length, 0);
    EXPECT_LE(r.report.eps_sec_int, m.eps_sec);
    EXPECT_LE(r.robustness.total, m.eps_rob);
    KeyRateResult copy = r;
    EXPECT_TRUE(reverify(m, copy));
  }
}

TEST(Optimize, Deterministic) {
  const ExperimentModel m = base_model(Variant::qake);
  const auto a = optimize(m), b = optimize(m);
  EXPECT_EQ(a.key_length, b.key_length);
  EXPECT_EQ(a.f_p1, b.f_p1);
}

TEST(Optimize, LooserSecurityTargetNeverShrinksKey) {
  ExperimentModel m = base_model(Variant::qake);
  const double tight = optimize(m).key_length;
  m.eps_sec = 1e-6;
  EXPECT_GE(optimize(m).key_length, tight);
}

TEST(Optimize, LongerBlocksGiveLongerKeys) {
  ExperimentModel m = base_model(Variant::qake);
  m.n_pulses = 1e9;
  const double small = optimize(m).key_length;
  m.n_pulses = 1e10;
  EXPECT_GE(optimize(m).key_length, small);
}

TEST(Optimize, FormulaLeakModeIsFeasible) {
  ExperimentModel m = base_model(Variant::qake);
  m.leak_mode = LeakMode::formula;
  const auto r = optimize(m);
  EXPECT_TRUE(r.feasible);
  EXPECT_GT(r.thresholds.leak_ec, 0);
}

TEST(Optimize, FixedTestFractionIsRespected) {
  ExperimentModel m = base_model(Variant::qake);
  m.f_p1 = 0.2;
  EXPECT_DOUBLE_EQ(optimize(m).f_p1, 0.2);
}

TEST(Sweep, SinglePointMatchesOptimize) {
  const ExperimentModel m = base_model(Variant::qake);
  const auto s = sweep(m, 10.0, 10.0, 1.0);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].key_length, optimize(m).key_length);
  EXPECT_THROW(sweep(m, 5.0, 4.0, 1.0), ConfigError);
}

TEST(Sweep, KeyLengthNonIncreasingInLoss) {
  const auto s = sweep(base_model(Variant::qake), 0.0, 30.0, 5.0);
  ASSERT_EQ(s.size(), 7u);
  for (std::size_t i = 1; i < s.size(); ++i) EXPECT_LE(s[i].key_length, s[i - 1].key_length) << s[i].loss_db;
}

TEST(Csv, HeaderAndRowWidthsAgree) {
  const auto r = optimize(base_model(Variant::qake));
  const std::string h = keyrate_csv_header(), row = keyrate_csv_row(r);
  EXPECT_EQ(std::count(h.begin(), h.end(), ','), std::count(row.begin(), row.end(), ','));
  EXPECT_EQ(h.substr(0, 19), "loss_db,key_length,");
}
