#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "qake/finite_key.hpp"

using namespace qake;

namespace {

// Thresholds at a mid-sized operating point, used where only formula structure matters.
ProtocolThresholds sample_thresholds() {
  ProtocolThresholds th;
  th.sift_tol = 2e5;
  th.n1_p2_tol = 8e4;
  th.n1_p1_tol = 3e4;
  th.e1_tol = 0.03;
  th.ebit_tol = 0.025;
  th.f_p1 = 0.3;
  th.leak_ec = 2e4;
  th.l_kb = 1e4;
  return th;
}

}  // namespace

TEST(BinaryEntropy, Oracles) {
  EXPECT_EQ(binary_entropy(0.0), 0.0);
  EXPECT_EQ(binary_entropy(1.0), 0.0);
  EXPECT_DOUBLE_EQ(binary_entropy(0.5), 1.0);
  EXPECT_NEAR(binary_entropy(0.02), 0.14144054254182065, 1e-15);
  EXPECT_NEAR(binary_entropy(0.05), 0.28639695711595625, 1e-15);
  EXPECT_THROW(binary_entropy(1.5), DomainError);
}

TEST(Serfling, Oracles) {
  EXPECT_NEAR(serfling_correction(100, 100, 1e-9), 0.45749861743305712, 1e-14);
  EXPECT_NEAR(serfling_correction(200, 100, 1e-9), 0.39522350163671134, 1e-14);
  EXPECT_LT(serfling_correction(200, 100, 1e-9), serfling_correction(100, 100, 1e-9));
  EXPECT_EQ(serfling_correction(100, 100, 1.0), 0.0);
  EXPECT_THROW(serfling_correction(0.5, 100, 0.1), DomainError);
  EXPECT_THROW(serfling_correction(10, 100, 0.0), DomainError);
}

TEST(PhotonProbs, Oracles) {
  const SourceConfig standard;
  EXPECT_NEAR(single_photon_prob(standard), 0.16518622317847550, 1e-15);
  EXPECT_NEAR(zero_photon_prob(standard), 0.80663536157998088, 1e-15);
  SourceConfig vac;
  vac.probs = {0, 0, 1};
  EXPECT_EQ(single_photon_prob(vac), 0.0);
  SourceConfig one;
  one.mu = {1.0, 0.5, 0.0};
  one.probs = {1, 0, 0};
  EXPECT_NEAR(single_photon_prob(one), std::exp(-1.0), 1e-15);
}

namespace {

// Expected counts of a noiseless (or fixed-QBER) Poisson channel.
struct PoissonTruth {
  IntensityBounds det, err;
  double n1 = 0, e1 = 0;
};

PoissonTruth poisson_truth(const SourceConfig& src, double eta, double n, double qber) {
  PoissonTruth t;
  for (int j = 0; j < 3; ++j) {
    const double d = n * src.probs[j] * (1.0 - std::exp(-eta * src.mu[j]));
    t.det.lower[j] = t.det.upper[j] = d;
    t.err.lower[j] = t.err.upper[j] = qber * d;
    t.n1 += n * src.probs[j] * src.mu[j] * std::exp(-src.mu[j]) * eta;
  }
  t.e1 = qber * t.n1;
  return t;
}

}  // namespace

TEST(Decoy, SinglePhotonBoundsAreSoundAtExpectation) {
  const SourceConfig src;
  for (double eta : {0.5, 0.1, 0.01}) {
    const auto t = poisson_truth(src, eta, 1e6, 0.02);
    const double lb = decoy_single_photon_lb(t.det, src);
    EXPECT_GT(lb, 0.0);
    EXPECT_LE(lb, t.n1);
    const auto ub = decoy_single_photon_error_ub(t.err, src);
    EXPECT_GE(ub.value, t.e1);
    EXPECT_FALSE(ub.clamped);
  }
}

TEST(Decoy, ZeroInputsGiveZero) {
  const SourceConfig src;
  EXPECT_EQ(decoy_single_photon_lb(IntensityBounds{}, src), 0.0);
  EXPECT_EQ(decoy_single_photon_error_ub(IntensityBounds{}, src).value, 0.0);
}

TEST(Decoy, DegenerateIntensitiesRejected) {
  SourceConfig src;
  src.mu = {0.45, 0.2, 0.2};
  EXPECT_THROW(decoy_single_photon_lb(IntensityBounds{}, src), DomainError);
}

TEST(Decoy, PathologicalErrorBoundIsClampedAndFlagged) {
  IntensityBounds err;
  err.upper = {0, 0, 0};
  err.lower = {0, 0, 1e6};
  const auto ub = decoy_single_photon_error_ub(err, SourceConfig{});
  EXPECT_EQ(ub.value, 0.0);
  EXPECT_TRUE(ub.clamped);
}

TEST(Concentration, HoeffdingDeviation) {
  const auto iv = concentration_bounds(5e5, 1e6, 1e-10, ConcentrationMethod::hoeffding);
  EXPECT_NEAR(5e5 - iv.lower, 3393.0702122075559, 1e-6);
  EXPECT_NEAR(iv.upper - 5e5, 3393.0702122075559, 1e-6);
}

TEST(Concentration, EpsOneCollapses) {
  for (auto m : {ConcentrationMethod::kato, ConcentrationMethod::hoeffding}) {
    const auto iv = concentration_bounds(500, 1000, 1.0, m);
    EXPECT_EQ(iv.lower, 500);
    EXPECT_EQ(iv.upper, 500);
  }
}

TEST(Concentration, KatoIsTighterThanHoeffdingForSparseCounts) {
  const auto k = concentration_bounds(1e4, 1e8, 1e-10, ConcentrationMethod::kato);
  const auto h = concentration_bounds(1e4, 1e8, 1e-10, ConcentrationMethod::hoeffding);
  EXPECT_GT(k.lower, h.lower);
  EXPECT_LT(k.upper, h.upper);
}

TEST(Concentration, RejectsBadCounts) {
  EXPECT_THROW(concentration_bounds(11, 10, 0.1, ConcentrationMethod::kato), DomainError);
  EXPECT_THROW(concentration_bounds(1, 10, 0.0, ConcentrationMethod::kato), DomainError);
}

// The interval around an observed binomial count should miss the true mean
// with frequency at most 2 eps.
TEST(Concentration, MonteCarloSoundness) {
  const double eps = 0.02, n = 2000, p = 0.3;
  for (auto m : {ConcentrationMethod::kato, ConcentrationMethod::hoeffding}) {
    std::mt19937_64 rng(5);
    std::binomial_distribution<int> draw(static_cast<int>(n), p);
    int miss = 0;
    const int trials = 10000;
    for (int t = 0; t < trials; ++t) {
      const auto iv = concentration_bounds(draw(rng), n, eps, m);
      if (n * p < iv.lower || n * p > iv.upper) ++miss;
    }
    // 2 eps plus a 99.9% binomial allowance.
    EXPECT_LE(miss, 2 * eps * trials + 3.1 * std::sqrt(trials * 2 * eps)) << to_string(m);
  }
}

TEST(BinomialTail, Oracles) {
  EXPECT_EQ(binomial_tail(10, 0.3, 0).prob, 1.0);
  EXPECT_NEAR(binomial_tail(10, 0.5, 10).prob, 9.765625e-4, 1e-18);
  EXPECT_NEAR(binomial_tail(100, 0.1, 20).prob / 0.0019785608657712312, 1.0, 1e-12);
  // Below the mean the complement path is used.
  EXPECT_NEAR(binomial_tail(100, 0.1, 5).prob, 0.97628891733652320, 1e-12);
  EXPECT_EQ(binomial_tail(1e10, 1e-4, 2e6).mode, TailMode::chernoff);
  EXPECT_THROW(binomial_tail(10, 0.5, 11), DomainError);
}

TEST(BinomialTail, QuantilesBracketTheTail) {
  const double n = 1e5, p = 0.01, eps = 1e-6;
  const double lo = binomial_low_quantile(n, p, eps), hi = binomial_high_quantile(n, p, eps);
  EXPECT_LE(binomial_lower_tail(n, p, lo - 1).prob, eps);
  EXPECT_GT(binomial_lower_tail(n, p, lo).prob, eps);
  EXPECT_LE(binomial_tail(n, p, hi + 1).prob, eps);
  EXPECT_GT(binomial_tail(n, p, hi).prob, eps);
}

TEST(PhaseError, Oracles) {
  EXPECT_DOUBLE_EQ(phase_error_tol(0.03, 100, 100, 1.0, 1.0, PhaseVariant::plain), 0.03);
  EXPECT_NEAR(phase_error_tol(0.02, 1e5, 1e5, 1e-20, 1.0, PhaseVariant::plain), 0.02 + 0.021459767560926542, 1e-15);
  const double base = phase_error_tol(0.02, 1e5, 1e5, 1e-20, 1.0, PhaseVariant::plain);
  EXPECT_NEAR(phase_error_tol(0.02, 1e5, 1e5, 1e-20, 1e-10, PhaseVariant::prng) - base, 0.042919320525786945, 1e-14);
  EXPECT_TRUE(key_killing(0.5));
  EXPECT_FALSE(key_killing(0.11));
}

TEST(HPrime, Oracles) {
  ProtocolThresholds th;
  th.n1_p2_tol = 1e5;
  th.leak_ec = 0;
  EXPECT_NEAR(h_prime(th, 0.05), 71198.304288404387, 1e-8);
  th.leak_ec = 1234;
  EXPECT_DOUBLE_EQ(h_prime(th, 0.5), -2.0 - 160.0 - 1234.0);
  EXPECT_LT(h_prime(th, 0.05), 71198.3 - 1000);
}

TEST(SecurityQake, MessageGuessTermExample) {
  ProtocolThresholds th;
  th.sift_tol = 64;
  th.f_p1 = 0.5;
  const auto r = security_params_qake(th, EpsilonBudget{});
  EXPECT_NEAR(std::log2(r.eps_phi1 - std::exp2(-80.0)), -128.0 + std::log2(65.0), 5e-3);
  EXPECT_NEAR(std::log2(r.eps_phi1), -80.0, 1e-12);
}

TEST(SecurityQake, KeySecrecyExample) {
  ProtocolThresholds th = sample_thresholds();
  EpsilonBudget b;
  b.eps_serf1 = 1e-20;
  th.l_kb = 0;
  const double h = security_params_qake(th, b).h_prime;
  th.l_kb = h - 200.0;
  const auto r = security_params_qake(th, b);
  EXPECT_NEAR(r.ks_exponent, 200.0, 1e-9);
  EXPECT_NEAR(r.eps_ks_prime / (2.8284271247461901e-10 + std::exp2(-101.0)), 1.0, 1e-12);
}

TEST(SecurityQake, TupleSumsAreExact) {
  for (auto f : {SpFormula::leftover_mac, SpFormula::compact_mac, SpFormula::two_universal}) {
    const auto r = security_params_qake(sample_thresholds(), EpsilonBudget{}, f);
    EXPECT_EQ(r.eps_sec, r.eps_ea + r.eps_ms + r.eps_ks);
    EXPECT_EQ(r.eps_sec_int - r.eps_sec, r.eps_sp);
    EXPECT_TRUE(r.binding);
  }
}

TEST(SecurityQake, SmallEntriesSurviveLargeTotals) {
  ProtocolThresholds th = sample_thresholds();
  const EpsilonBudget b;
  th.l_kb = std::floor(security_params_qake(th, b).h_prime) - 60;
  const auto r = security_params_qake(th, b);
  EXPECT_GT(r.eps_sec, 1e-12);
  EXPECT_LT(r.eps_sec, 1e-6);
  EXPECT_EQ(r.eps_ms, b.eps_mac2);
  EXPECT_EQ(r.eps_sec_int - r.eps_sec, r.eps_sp);
  EXPECT_LE(r.eps_sp - (r.eps_sp_prime + r.eps_p_prime), r.eps_sec_int * 0x1p-52);
}

TEST(SecurityQake, OversizedKeyIsNonBinding) {
  ProtocolThresholds th = sample_thresholds();
  th.l_kb = 1e7;
  EXPECT_FALSE(security_params_qake(th, EpsilonBudget{}).binding);
}

TEST(SecurityQake, LooseLimitLeavesSmoothingTerms) {
  ProtocolThresholds th = sample_thresholds();
  th.sift_tol = 1e7;
  th.n1_p2_tol = 1e7;
  th.l_kb = 0;
  th.tag_av_bits = th.tag_bv_bits = 1000;
  EpsilonBudget b = EpsilonBudget::for_tags(1000, 1000);
  b.ds = {1e-300, 1e-300, 1e-300, 1e-300};
  b.eps_serf1 = 1e-20;
  const auto r = security_params_qake(th, b, SpFormula::two_universal);
  EXPECT_NEAR(r.eps_ks / (2.0 * std::sqrt(2e-20)), 1.0, 1e-9);
  EXPECT_NEAR(r.eps_sp / (4.0 * std::sqrt(2e-20)), 1.0, 1e-9);
}

TEST(SecurityPrng, SeedTermAndSmoothing) {
  ProtocolThresholds th = sample_thresholds();
  th.l_theta = 256;
  EpsilonBudget b;
  const auto r = security_params_prng(th, b, 1e10);
  EXPECT_EQ(r.eps_theta, std::exp2(-128.0));
  b.eps_irng = b.eps_prng = b.eps_serf1 = 1e-30;
  EXPECT_NEAR(security_params_prng(th, b, 1e10).eps_smooth / std::sqrt(8e-30), 1.0, 1e-12);
  th.l_theta = 600;
  EXPECT_THROW(security_params_prng(th, b, 1200), DomainError);
}

TEST(SecurityPrng, DegeneratesToPlainQuantities) {
  ProtocolThresholds th = sample_thresholds();
  th.l_theta = 0;
  const EpsilonBudget b;
  const auto q = security_params_qake(th, b);
  const auto p = security_params_prng(th, b, 1e10, false);
  EXPECT_EQ(p.e_ph_tol, q.e_ph_tol);
  EXPECT_EQ(p.h_prime, q.h_prime);
  EXPECT_EQ(p.ks_exponent, q.ks_exponent);
  EXPECT_EQ(p.eps_smooth, q.eps_smooth);
  EXPECT_EQ(p.eps_p_core, q.eps_p_core);
  EXPECT_EQ(p.eps_ms, q.eps_ms);
  EXPECT_EQ(p.eps_theta, 0.0);
  EXPECT_EQ(p.eps_sec_int - p.eps_sec, p.eps_sp);
}

TEST(MaxKeyLength, Properties) {
  ProtocolThresholds th = sample_thresholds();
  const EpsilonBudget b;
  const double l = max_key_length(th, b, 1e-9, SpFormula::two_universal);
  EXPECT_GT(l, 0);
  th.l_kb = l;
  EXPECT_LE(security_params_qake(th, b, SpFormula::two_universal).eps_sec_int, 1e-9);
  th.l_kb = l + 1;
  EXPECT_GT(security_params_qake(th, b, SpFormula::two_universal).eps_sec_int, 1e-9);

  ProtocolThresholds doubled = sample_thresholds();
  doubled.n1_p2_tol *= 2;
  EXPECT_GT(max_key_length(doubled, b, 1e-9, SpFormula::two_universal), 2 * l);

  ProtocolThresholds dead = sample_thresholds();
  dead.e1_tol = 0.5;
  EXPECT_EQ(max_key_length(dead, b, 1e-9), 0);
  EXPECT_THROW(max_key_length(th, b, 0.0), DomainError);
}

TEST(MaxKeyLength, LooseTargetApproachesHPrime) {
  ProtocolThresholds th = sample_thresholds();
  th.l_kb = 0;
  const double h = security_params_qake(th, EpsilonBudget{}, SpFormula::two_universal).h_prime;
  const double l = max_key_length(th, EpsilonBudget{}, 1.0, SpFormula::two_universal);
  EXPECT_GT(l, h - 10);
  EXPECT_LT(l, h + 10);
}

TEST(Robustness, ZeroThresholdsAndUnreachable) {
  ObservableModel m;
  m.n_pulses = 1e9;
  m.q_sift = 0.01;
  m.q_test = {1e-3, 2e-3, 1e-5};
  m.q_key = {3e-3, 6e-3, 3e-5};
  m.q_test_err = {2e-5, 4e-5, 5e-6};
  ProtocolThresholds th;
  th.e1_tol = 0.5;
  th.ebit_tol = 0.5;
  const EpsilonBudget b;
  const auto r0 = robustness(m, th, b, ConcentrationMethod::kato, LeakMode::fraction);
  EXPECT_LT(r0.total, 1e-12);
  EXPECT_TRUE(r0.reachable);
  th.sift_tol = 2e7;
  const auto r1 = robustness(m, th, b, ConcentrationMethod::kato, LeakMode::fraction);
  EXPECT_EQ(r1.sift, 1.0);
  EXPECT_FALSE(r1.reachable);
}

TEST(ReportIo, KvRoundTripAndStrictParsing) {
  const auto r = security_params_qake(sample_thresholds(), EpsilonBudget{});
  const std::string kv = to_kv(report_fields(r));
  const auto back = report_from_kv(kv);
  EXPECT_EQ(report_fields(back), report_fields(r));
  EXPECT_THROW(report_from_kv(kv + "bogus=1\n"), ParseError);
  EXPECT_THROW(report_from_kv(kv + "eps_ea=1\n"), ParseError);
  EXPECT_THROW(report_from_kv("eps_ea=abc\n"), ParseError);
  EXPECT_THROW(report_from_kv("eps_ea=1\n"), ParseError);
  EXPECT_EQ(csv_header(report_fields(r)).substr(0, 13), "eps_ea,eps_ms");
}

TEST(ReportIo, FormatDoubleRoundTrips) {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456789.0, 5e-324})
    EXPECT_EQ(std::strtod(format_double(v).c_str(), nullptr), v);
  EXPECT_EQ(format_double(0.5), "0.5");
}
