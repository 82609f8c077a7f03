#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "qake/errors.hpp"
#include "qake/finite_key.hpp"
#include "qake/quantum_channel.hpp"

namespace qake {

enum class Variant { qake, prng, bb84_standard, bb84_unbalanced };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::qake: return "qake";
    case Variant::prng: return "prng";
    case Variant::bb84_standard: return "bb84_standard";
    case Variant::bb84_unbalanced: return "bb84_unbalanced";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "qake") return Variant::qake;
  if (s == "prng") return Variant::prng;
  if (s == "bb84_standard" || s == "bb84") return Variant::bb84_standard;
  if (s == "bb84_unbalanced") return Variant::bb84_unbalanced;
  throw ConfigError("unknown variant '" + s + "'");
}

inline LeakMode parse_leak_mode(const std::string& s) {
  if (s == "fraction") return LeakMode::fraction;
  if (s == "formula") return LeakMode::formula;
  throw ConfigError("unknown leak mode '" + s + "'");
}

struct ExperimentModel {
  SourceConfig src;
  ChannelConfig ch;
  std::optional<double> p_det;  // overall per-pulse click probability; replaces ch.eta when set
  double n_pulses = 2e10;
  Variant variant = Variant::qake;
  std::optional<double> p_x;    // unbalanced only; optimized when absent
  std::optional<double> f_p1;   // fixed test fraction; optimized when absent
  LeakMode leak_mode = LeakMode::fraction;
  double leak_fraction = 0.30;
  double f_ec = 1.16;
  double tag_av_bits = 80;
  double tag_bv_bits = 80;
  double eps_sec = 1e-15;
  double eps_rob = 1e-10;
  double l_theta = 256;
  double eps_prng = std::exp2(-128.0);
  ConcentrationMethod method = ConcentrationMethod::kato;
  SpFormula sp_formula = SpFormula::two_universal;

  void validate() const {
    src.validate();
    ch.validate();
    if (p_det && !(*p_det > 0 && *p_det < 1)) throw ConfigError("p_det must lie in (0,1)");
    if (!(n_pulses >= 1)) throw ConfigError("n_pulses must be >= 1");
    if (p_x && !(*p_x > 0 && *p_x < 1)) throw ConfigError("p_x must lie in (0,1)");
    if (f_p1 && !(*f_p1 > 0 && *f_p1 < 1)) throw ConfigError("f_p1 must lie in (0,1)");
    if (!(leak_fraction >= 0 && leak_fraction <= 1)) throw ConfigError("leak fraction must lie in [0,1]");
    if (!(f_ec >= 1)) throw ConfigError("f_EC must be >= 1");
    if (!(tag_av_bits >= 1 && tag_bv_bits >= 1)) throw ConfigError("tag sizes must be >= 1");
    if (!(eps_sec > 0 && eps_sec < 1) || !(eps_rob > 0 && eps_rob < 1)) throw ConfigError("targets must lie in (0,1)");
  }
};

// Transmittance reproducing a given overall click probability.
inline double eta_for_detection_rate(const SourceConfig& src, double dark, double p_det) {
  auto rate = [&](double eta) {
    double s = 0;
    for (int j = 0; j < 3; ++j) s += src.probs[j] * detection_prob(eta, src.mu[j], dark);
    return s;
  };
  if (!(p_det > rate(0.0) && p_det < rate(1.0))) throw ConfigError("detection rate unreachable with this source");
  double lo = 0, hi = 1;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (rate(mid) < p_det ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

inline double model_eta(const ExperimentModel& m) {
  return m.p_det ? eta_for_detection_rate(m.src, m.ch.dark_count_prob, *m.p_det) : m.ch.eta;
}

// Per-pulse probabilities of landing in each set. The test fraction only
// matters for the variants that split the sifted set at random.
inline ObservableModel expected_observables(const ExperimentModel& m, double f_p1, double p_x = 0.5) {
  m.validate();
  const double eta = model_eta(m);
  ObservableModel o;
  o.src = m.src;
  o.n_pulses = m.n_pulses;
  double sift = 0.5, test = 0, key = 0;
  switch (m.variant) {
    case Variant::qake:
    case Variant::bb84_standard:
      sift = 0.5;
      test = f_p1 * sift;
      key = (1 - f_p1) * sift;
      break;
    case Variant::prng:
      sift = 1.0;
      test = f_p1;
      key = 1 - f_p1;
      break;
    case Variant::bb84_unbalanced:
      test = p_x * p_x;
      key = (1 - p_x) * (1 - p_x);
      sift = test + key;
      break;
  }
  for (int j = 0; j < 3; ++j) {
    const double signal = 1.0 - std::exp(-eta * m.src.mu[j]);
    const double dark_only = m.ch.dark_count_prob * std::exp(-eta * m.src.mu[j]);
    const double click = m.src.probs[j] * (signal + dark_only);
    const double err = m.src.probs[j] * (m.ch.qber * signal + 0.5 * dark_only);
    o.q_sift += sift * click;
    o.q_test[j] = test * click;
    o.q_key[j] = key * click;
    o.q_test_err[j] = test * err;
    o.q_key_err[j] = key * err;
  }
  return o;
}

struct EpsilonSplit {
  double ds_share = 0.3;     // of eps_sec, spent on the four decoy estimates together
  double smooth_share = 0.3; // of eps_sec, spent on the smoothing terms
};

struct KeyRateResult {
  double loss_db = 0;
  double eta = 0;
  double key_length = 0;
  double f_p1 = 0;
  double p_x = 0.5;
  ProtocolThresholds thresholds;
  EpsilonBudget budget;
  EpsilonSplit split;
  SecurityReport report;
  RobustnessReport robustness;
  bool feasible = false;
};

namespace detail {

inline bool uses_prng_formula(Variant v) { return v != Variant::qake; }

inline EpsilonBudget budget_for(const ExperimentModel& m, const EpsilonSplit& s) {
  EpsilonBudget b = EpsilonBudget::for_tags(m.tag_av_bits, m.tag_bv_bits);
  // eps_ds enters the intermediate-round parameter four times.
  const double ds = s.ds_share * m.eps_sec / 4.0;
  b.ds.n1_p2 = b.ds.n1_p1 = b.ds.e1_p1 = ds / 3.0 * (1 - 1e-6);
  b.ds.n0_p2 = ds * 1e-6;
  // Coefficient of sqrt(2 eps_serf1): 6 in the plain analysis, 14 with the
  // generator terms (where eps_irng is given the same weight).
  const bool prng_terms = m.variant == Variant::prng;
  const double coef = uses_prng_formula(m.variant) ? 14.0 : 6.0;
  const double root = s.smooth_share * m.eps_sec / coef;
  const double inner = root * root / 2.0;
  if (prng_terms) {
    b.eps_prng = m.eps_prng;
    b.eps_serf1 = std::max(inner / 3.0 - b.eps_prng / 3.0, inner * 1e-3);
    b.eps_irng = b.eps_serf1;
  } else {
    b.eps_serf1 = inner;
    b.eps_irng = 1.0;
    b.eps_prng = 1.0;
  }
  b.eps2 = b.eps3 = 1e-3 * m.eps_sec / 8.0;
  b.eps_serf2 = m.leak_mode == LeakMode::formula ? 0.05 * m.eps_rob : 1.0;
  return b;
}

inline SecurityEvaluator evaluator_for(const ExperimentModel& m, const EpsilonBudget& b) {
  if (m.variant == Variant::qake)
    return [=](const ProtocolThresholds& t) { return security_params_qake(t, b, m.sp_formula); };
  const bool prng_terms = m.variant == Variant::prng;
  return [=](const ProtocolThresholds& t) { return security_params_prng(t, b, m.n_pulses, prng_terms); };
}

}  // namespace detail

// Thresholds sitting at the robustness corner of the model: every check
// passes unless some count strays beyond its allotted quantile.
inline ProtocolThresholds select_thresholds(const ExperimentModel& m, const ObservableModel& o, double f_p1,
                                            const EpsilonBudget& b) {
  ProtocolThresholds th;
  th.f_p1 = f_p1;
  th.tag_av_bits = m.tag_av_bits;
  th.tag_bv_bits = m.tag_bv_bits;
  th.l_theta = m.variant == Variant::prng ? m.l_theta : 0.0;
  // Five checks share 90% of the robustness target; the rest covers eps_serf2.
  const double a = 0.9 * m.eps_rob / 5.0;
  th.sift_tol = binomial_low_quantile(o.n_pulses, o.q_sift, a);
  th.n1_p2_tol = std::floor(detail::corner_n1(o, o.q_key, a / 3.0, b.ds.n1_p2, m.method));
  th.n1_p1_tol = std::floor(detail::corner_n1(o, o.q_test, a / 3.0, b.ds.n1_p1, m.method));
  th.n0_p2_tol = 0;
  th.e1_tol = std::min(0.5, detail::corner_e1(o, a / 5.0, b.ds, m.method));
  th.ebit_tol = std::min(0.5, detail::corner_ebit(o, a / 2.0));
  const double key_high = binomial_high_quantile(o.n_pulses, detail::q_sum(o.q_key), a);
  if (m.leak_mode == LeakMode::fraction) {
    th.leak_ec = std::ceil(m.leak_fraction * key_high);
  } else {
    const double test_low = binomial_low_quantile(o.n_pulses, detail::q_sum(o.q_test), a);
    const double e = ec_error_tolerance(th, test_low, key_high, b.eps_serf2);
    th.leak_ec = std::ceil(m.f_ec * binary_entropy(e) * key_high);
  }
  return th;
}

inline KeyRateResult evaluate_point(const ExperimentModel& m, double f_p1, const EpsilonSplit& split,
                                    double p_x = 0.5) {
  KeyRateResult r;
  r.eta = model_eta(m);
  r.loss_db = r.eta > 0 ? -10.0 * std::log10(r.eta) : std::numeric_limits<double>::infinity();
  r.f_p1 = m.variant == Variant::bb84_unbalanced ? p_x * p_x / (p_x * p_x + (1 - p_x) * (1 - p_x)) : f_p1;
  r.p_x = p_x;
  r.split = split;
  r.budget = detail::budget_for(m, split);
  const ObservableModel o = expected_observables(m, f_p1, p_x);
  if (o.q_sift <= 0) return r;
  r.thresholds = select_thresholds(m, o, r.f_p1, r.budget);
  if (r.thresholds.n1_p2_tol < 1 || r.thresholds.n1_p1_tol < 1) return r;
  const auto eval = detail::evaluator_for(m, r.budget);
  r.key_length = max_key_length(r.thresholds, eval, m.eps_sec);
  r.thresholds.l_kb = r.key_length;
  r.report = eval(r.thresholds);
  r.feasible = r.key_length > 0;
  return r;
}

// Full check of a returned certificate against both targets.
inline bool reverify(const ExperimentModel& m, KeyRateResult& r) {
  if (!r.feasible) return false;
  const ObservableModel o = expected_observables(m, r.f_p1, r.p_x);
  r.robustness = robustness(o, r.thresholds, r.budget, m.method, m.leak_mode);
  r.report = detail::evaluator_for(m, r.budget)(r.thresholds);
  r.report.eps_rob = r.robustness.total;
  return r.report.eps_sec_int <= m.eps_sec && r.robustness.reachable && r.robustness.total <= m.eps_rob;
}

inline KeyRateResult optimize(const ExperimentModel& m) {
  m.validate();
  KeyRateResult best;
  best.eta = model_eta(m);
  best.loss_db = best.eta > 0 ? -10.0 * std::log10(best.eta) : std::numeric_limits<double>::infinity();
  auto consider = [&](const KeyRateResult& r) {
    if (r.key_length > best.key_length) best = r;
  };

  // Coarse grid: test fraction (or X-basis probability) x log-spaced eps shares.
  std::vector<double> fs;
  const bool unbalanced = m.variant == Variant::bb84_unbalanced;
  if (unbalanced ? m.p_x.has_value() : m.f_p1.has_value()) {
    fs = {unbalanced ? *m.p_x : *m.f_p1};
  } else {
    for (int i = 0; i < 10; ++i) fs.push_back(0.05 + 0.05 * i);
  }
  const std::array<double, 4> shares{0.05, 0.15, 0.35, 0.6};
  for (double f : fs)
    for (double ds : shares)
      for (double sm : shares) {
        if (ds + sm >= 0.95) continue;
        EpsilonSplit s{ds, sm};
        consider(unbalanced ? evaluate_point(m, 0.5, s, f) : evaluate_point(m, f, s));
      }
  if (best.key_length <= 0) return best;

  // Coordinate refinement with shrinking steps.
  double df = fs.size() > 1 ? 0.025 : 0.0, dlog = 0.5;
  for (int round = 0; round < 6; ++round) {
    bool improved = true;
    while (improved) {
      improved = false;
      const KeyRateResult cur = best;
      const double f0 = unbalanced ? cur.p_x : cur.f_p1;
      std::vector<std::pair<double, EpsilonSplit>> cand;
      if (df > 0)
        for (double d : {-df, df}) cand.push_back({f0 + d, cur.split});
      for (double d : {-dlog, dlog}) {
        EpsilonSplit a = cur.split, b = cur.split;
        a.ds_share *= std::exp(d);
        b.smooth_share *= std::exp(d);
        cand.push_back({f0, a});
        cand.push_back({f0, b});
      }
      for (auto& [f, s] : cand) {
        if (!(f > 0.01 && f < 0.6) || s.ds_share + s.smooth_share >= 0.99) continue;
        const auto r = unbalanced ? evaluate_point(m, 0.5, s, f) : evaluate_point(m, f, s);
        if (r.key_length > best.key_length) {
          best = r;
          improved = true;
        }
      }
    }
    df /= 2;
    dlog /= 2;
  }
  best.feasible = reverify(m, best);
  if (!best.feasible) best.key_length = 0;
  return best;
}

inline std::vector<KeyRateResult> sweep(const ExperimentModel& m, double loss_from, double loss_to, double step) {
  if (!(step > 0) || loss_to < loss_from) throw ConfigError("invalid loss range");
  std::vector<KeyRateResult> out;
  for (int i = 0;; ++i) {
    const double loss = loss_from + step * i;
    if (loss > loss_to + 1e-9) break;
    ExperimentModel p = m;
    p.p_det.reset();
    p.ch.eta = ChannelConfig::db_to_eta(loss);
    auto r = optimize(p);
    r.loss_db = loss;
    out.push_back(r);
  }
  return out;
}

inline std::string keyrate_csv_header() {
  return "loss_db,key_length,f_p1,eps_ea,eps_ms,eps_ks,eps_sp,eps_sec,eps_sec_int,eps_rob,feasible";
}

inline std::string keyrate_csv_row(const KeyRateResult& r) {
  std::ostringstream os;
  os.precision(10);
  os << r.loss_db << ',' << r.key_length << ',' << r.f_p1 << ',';
  os.precision(6);
  os << r.report.eps_ea << ',' << r.report.eps_ms << ',' << r.report.eps_ks << ',' << r.report.eps_sp << ','
     << r.report.eps_sec << ',' << r.report.eps_sec_int << ',' << r.robustness.total << ',' << (r.feasible ? 1 : 0);
  return os.str();
}

}  // namespace qake
