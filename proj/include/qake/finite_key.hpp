#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qake/errors.hpp"
#include "qake/quantum_channel.hpp"

namespace qake {

inline double binary_entropy(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("binary entropy argument outside [0,1]");
  if (p == 0.0 || p == 1.0) return 0.0;
  return -p * std::log2(p) - (1.0 - p) * std::log2(1.0 - p);
}

// Sampling-without-replacement correction g(a, b, c): with probability at
// least 1-c the rate on a set of size b exceeds the rate on a test set of size a
// by no more than this.
inline double serfling_correction(double a, double b, double c) {
  if (!(a >= 1.0 && b >= 1.0)) throw DomainError("serfling correction needs set sizes >= 1");
  if (!(c > 0.0 && c <= 1.0)) throw DomainError("serfling correction needs 0 < c <= 1");
  return std::sqrt((b + a) * (a + 1.0) / (2.0 * a * a * b) * std::log(1.0 / c));
}

inline double single_photon_prob(const SourceConfig& src) {
  double s = 0;
  for (int j = 0; j < 3; ++j) s += src.probs[j] * src.mu[j] * std::exp(-src.mu[j]);
  return s;
}

inline double zero_photon_prob(const SourceConfig& src) {
  double s = 0;
  for (int j = 0; j < 3; ++j) s += src.probs[j] * std::exp(-src.mu[j]);
  return s;
}

// Bounds on the (conditional) expectations of per-intensity counts.
struct IntensityBounds {
  std::array<double, 3> lower{};
  std::array<double, 3> upper{};
};

namespace detail {

inline void check_decoy_source(const SourceConfig& src) {
  if (!(src.mu[0] > src.mu[1] && src.mu[1] > src.mu[2] && src.mu[2] >= 0.0))
    throw DomainError("decoy bound needs mu0 > mu1 > mu2 >= 0");
  if (!(src.mu[0] > src.mu[1] + src.mu[2])) throw DomainError("decoy bound needs mu0 > mu1 + mu2");
}

// e^mu / p_mu * count. A never-chosen intensity contributes nothing.
inline double weighted(const SourceConfig& src, int j, double count) {
  if (src.probs[j] == 0.0) {
    if (count != 0.0) throw DomainError("nonzero count for an intensity with zero probability");
    return 0.0;
  }
  return std::exp(src.mu[j]) / src.probs[j] * count;
}

}  // namespace detail

inline double decoy_single_photon_lb(const IntensityBounds& b, const SourceConfig& src) {
  detail::check_decoy_source(src);
  const double m0 = src.mu[0], m1 = src.mu[1], m2 = src.mu[2];
  const double pre = single_photon_prob(src) * m0 / ((m1 - m2) * (m0 - m1 - m2));
  const double pos = detail::weighted(src, 1, b.lower[1]) * (1.0 - m2 * (m1 + m2) / (m0 * m0));
  const double neg0 = (m1 * m1 - m2 * m2) / (m0 * m0) * detail::weighted(src, 0, b.upper[0]);
  const double neg2 = detail::weighted(src, 2, b.upper[2]) * (1.0 - m1 * (m1 + m2) / (m0 * m0));
  return std::max(0.0, pre * (pos - neg0 - neg2));
}

struct ClampedEstimate {
  double value = 0;
  bool clamped = false;
};

// Upper bound on single-photon errors from error-count expectations, clamped to [0, set_size].
inline ClampedEstimate decoy_single_photon_error_ub(const IntensityBounds& err, const SourceConfig& src,
                                                    double set_size = std::numeric_limits<double>::infinity()) {
  detail::check_decoy_source(src);
  const double m1 = src.mu[1], m2 = src.mu[2];
  const double raw = single_photon_prob(src) / (m1 - m2) *
                     (detail::weighted(src, 1, err.upper[1]) - detail::weighted(src, 2, err.lower[2]));
  if (raw < 0) return {0.0, true};
  if (raw > set_size) return {set_size, true};
  return {raw, false};
}

inline double decoy_zero_photon_lb(const IntensityBounds& b, const SourceConfig& src) {
  detail::check_decoy_source(src);
  const double m1 = src.mu[1], m2 = src.mu[2];
  const double v = zero_photon_prob(src) / (m1 - m2) *
                   (m1 * detail::weighted(src, 2, b.lower[2]) - m2 * detail::weighted(src, 1, b.upper[1]));
  return std::max(0.0, v);
}

enum class ConcentrationMethod { kato, hoeffding };

inline const char* to_string(ConcentrationMethod m) { return m == ConcentrationMethod::kato ? "kato" : "hoeffding"; }

struct ExpectationInterval {
  double lower = 0;
  double upper = 0;
};

namespace detail {

template <class F>
double golden_min(F f, double lo, double hi, int iters = 200) {
  const double r = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c = b - r * (b - a), d = a + r * (b - a);
  double fc = f(c), fd = f(d);
  for (int i = 0; i < iters && (b - a) > 1e-12 * (1.0 + std::abs(a) + std::abs(b)); ++i) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - r * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + r * (b - a);
      fd = f(d);
    }
  }
  return fc < fd ? c : d;
}

// Kato-type inequality for a sum of n variables in [0,1]: for fixed a, b with
// the exponent matched to eps,
//   P[sum E - L >= (b + a(2L/n - 1)) sqrt(n)] <= exp(-2(b^2-a^2)/(1 + 4a/(3 sqrt n))^2)
//   P[L - sum E >= (b + a(2L/n - 1)) sqrt(n)] <= exp(-2(b^2-a^2)/(1 - 4a/(3 sqrt n))^2)
// a is tuned for the anticipated count; b then follows from eps.
struct KatoParams {
  double a = 0, b = 0;
};

inline KatoParams kato_params(double anticipated, double n, double eps, bool upper_side) {
  const double L = std::log(1.0 / eps);
  const double sn = std::sqrt(n);
  const double k = (upper_side ? 4.0 : -4.0) / (3.0 * sn);
  auto b_of = [&](double a) { return std::sqrt(a * a + 0.5 * L * (1.0 + k * a) * (1.0 + k * a)); };
  const double slope = 2.0 * anticipated / n - 1.0;
  auto dev = [&](double a) { return b_of(a) + a * slope; };
  // Keep the exponent's denominator away from zero.
  const double edge = 0.75 * sn * (1.0 - 1e-9);
  const double span = 4.0 * sn * (1.0 + L);
  const double lo = upper_side ? -edge : -span;
  const double hi = upper_side ? span : edge;
  const double a = golden_min(dev, lo, hi);
  return {a, b_of(a)};
}

}  // namespace detail

// Two-sided bounds on the expectation behind an observed count out of n trials,
// each side failing with probability at most eps.
inline ExpectationInterval concentration_bounds(double observed, double n, double eps, ConcentrationMethod method,
                                                std::optional<double> anticipated = std::nullopt) {
  if (!(n >= 0.0) || !(observed >= 0.0) || observed > n) throw DomainError("invalid counts for concentration bound");
  if (!(eps > 0.0 && eps <= 1.0)) throw DomainError("concentration eps must lie in (0,1]");
  if (n == 0.0) return {0.0, 0.0};
  if (method == ConcentrationMethod::hoeffding) {
    const double dev = std::sqrt(n / 2.0 * std::log(1.0 / eps));
    return {std::max(0.0, observed - dev), std::min(n, observed + dev)};
  }
  if (eps == 1.0) return {observed, observed};
  const double guess = std::clamp(anticipated.value_or(observed), 0.0, n);
  const double sn = std::sqrt(n);
  const double slope = 2.0 * observed / n - 1.0;
  const auto up = detail::kato_params(guess, n, eps, true);
  const auto lo = detail::kato_params(guess, n, eps, false);
  const double upper = observed + (up.b + up.a * slope) * sn;
  const double lower = observed - (lo.b + lo.a * slope) * sn;
  return {std::max(0.0, lower), std::min(n, upper)};
}

enum class TailMode { exact, chernoff };

struct TailResult {
  double prob = 0;
  TailMode mode = TailMode::exact;
};

inline constexpr double kExactTailLimit = 1e8;

namespace detail {

inline double kl_bernoulli(double a, double p) {
  double d = 0;
  if (a > 0) d += a * std::log(a / p);
  if (a < 1) d += (1.0 - a) * (std::log1p(-a) - std::log1p(-p));
  return d;
}

inline double log_binom_pmf(double n, double p, double i) {
  return std::lgamma(n + 1) - std::lgamma(i + 1) - std::lgamma(n - i + 1) + i * std::log(p) + (n - i) * std::log1p(-p);
}

}  // namespace detail

// P[X >= k] for X ~ Binomial(n, p). Exact summation (started from the
// boundary term in log space) up to n = 1e8; a Chernoff upper bound beyond.
inline TailResult binomial_tail(double n, double p, double k) {
  if (!(n >= 0) || !(k >= 0) || k > n || n != std::floor(n) || k != std::floor(k))
    throw DomainError("binomial tail needs integers 0 <= k <= n");
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("binomial tail needs 0 <= p <= 1");
  if (k == 0) return {1.0, TailMode::exact};
  if (p == 0.0) return {0.0, TailMode::exact};
  if (p == 1.0) return {1.0, TailMode::exact};
  if (n > kExactTailLimit) {
    const double a = k / n;
    if (a <= p) return {1.0, TailMode::chernoff};
    return {std::exp(-n * detail::kl_bernoulli(a, p)), TailMode::chernoff};
  }
  const double odds = p / (1.0 - p);
  if (k > n * p) {
    // Terms fall off geometrically above the mean.
    double term = 1.0, sum = 1.0;
    for (double i = k; i < n; ++i) {
      term *= (n - i) / (i + 1.0) * odds;
      sum += term;
      if (term < sum * 1e-18) break;
    }
    return {std::exp(detail::log_binom_pmf(n, p, k) + std::log(sum)), TailMode::exact};
  }
  double term = 1.0, sum = 1.0;
  for (double i = k - 1; i > 0; --i) {
    term *= i / (n - i + 1.0) / odds;
    sum += term;
    if (term < sum * 1e-18) break;
  }
  const double lower = std::exp(detail::log_binom_pmf(n, p, k - 1) + std::log(sum));
  return {std::max(0.0, 1.0 - lower), TailMode::exact};
}

// P[X <= k].
inline TailResult binomial_lower_tail(double n, double p, double k) {
  if (k >= n) return {1.0, n > kExactTailLimit ? TailMode::chernoff : TailMode::exact};
  return binomial_tail(n, 1.0 - p, n - k);
}

// Largest k with P[X < k] <= eps.
inline double binomial_low_quantile(double n, double p, double eps) {
  double lo = 0, hi = std::floor(n * p);
  if (binomial_lower_tail(n, p, hi - 1 < 0 ? 0 : hi - 1).prob <= eps && hi >= 1) return hi;
  while (hi - lo > 1) {
    const double mid = std::floor((lo + hi) / 2);
    if (mid >= 1 && binomial_lower_tail(n, p, mid - 1).prob <= eps)
      lo = mid;
    else
      hi = mid;
  }
  return lo;
}

// Smallest k with P[X > k] <= eps.
inline double binomial_high_quantile(double n, double p, double eps) {
  double lo = std::ceil(n * p), hi = n;
  if (lo >= n || binomial_tail(n, p, lo + 1).prob <= eps) return std::min(lo, n);
  while (hi - lo > 1) {
    const double mid = std::floor((lo + hi) / 2);
    if (binomial_tail(n, p, mid + 1).prob <= eps)
      hi = mid;
    else
      lo = mid;
  }
  return hi;
}

enum class PhaseVariant { plain, prng };

inline double phase_error_tol(double e1_tol, double n1_p1, double n1_p2, double eps_serf1, double eps_irng,
                              PhaseVariant variant) {
  if (!(n1_p1 >= 1.0 && n1_p2 >= 1.0)) throw DomainError("phase error tolerance needs counts >= 1");
  double e = e1_tol + serfling_correction(n1_p1, n1_p2, eps_serf1);
  if (variant == PhaseVariant::prng && eps_irng < 1.0) e += 2.0 * std::sqrt(2.0 / n1_p2 * std::log(1.0 / eps_irng));
  return e;
}

inline bool key_killing(double e_ph) { return !(e_ph < 0.5); }

struct ProtocolThresholds {
  double sift_tol = 0;
  double n1_p2_tol = 0;
  double n1_p1_tol = 0;
  double n0_p2_tol = 0;
  double e1_tol = 0;
  double ebit_tol = 0;
  double f_p1 = 0.25;
  double tag_av_bits = 80;
  double tag_bv_bits = 80;
  double leak_ec = 0;
  double l_kb = 0;
  double l_theta = 0;

  void validate() const {
    for (double c : {sift_tol, n1_p2_tol, n1_p1_tol, n0_p2_tol, tag_av_bits, tag_bv_bits, leak_ec, l_kb, l_theta})
      if (!(c >= 0)) throw DomainError("threshold counts must be nonnegative");
    for (double r : {e1_tol, ebit_tol})
      if (!(r >= 0 && r <= 0.5)) throw DomainError("threshold rates must lie in [0,0.5]");
    if (!(f_p1 > 0 && f_p1 < 1)) throw DomainError("test fraction must lie in (0,1)");
  }
};

// Failure probabilities of the four decoy estimates; each is spread evenly
// over the one-sided count bounds the estimate uses.
struct DecoyEpsilons {
  double n1_p2 = 1e-17;
  double n1_p1 = 1e-17;
  double e1_p1 = 1e-17;
  double n0_p2 = 1e-17;
  double total() const { return n1_p2 + n1_p1 + e1_p1 + n0_p2; }
};

struct EpsilonBudget {
  double eps_mac1 = std::exp2(-80.0);
  double eps_mac2 = std::exp2(-80.0);
  DecoyEpsilons ds;
  double eps_serf1 = 1e-33;
  double eps_serf2 = 1e-12;
  double eps2 = 1e-20;
  double eps3 = 1e-20;
  double eps_irng = 1e-35;
  double eps_prng = std::exp2(-128.0);
  double eps_ec = 0.0;

  double eps_ds() const { return ds.total(); }

  static EpsilonBudget for_tags(double tag_av_bits, double tag_bv_bits) {
    EpsilonBudget b;
    b.eps_mac1 = std::exp2(-tag_av_bits);
    b.eps_mac2 = std::exp2(-tag_bv_bits);
    return b;
  }

  void validate() const {
    for (double e : {eps_mac1, eps_mac2, ds.n1_p2, ds.n1_p1, ds.e1_p1, ds.n0_p2, eps_serf1, eps_serf2, eps2, eps3,
                     eps_irng, eps_prng})
      if (!(e > 0.0 && e <= 1.0)) throw DomainError("epsilon budget entries must lie in (0,1]");
    if (!(eps_ec >= 0.0 && eps_ec <= 1.0)) throw DomainError("eps_ec must lie in [0,1]");
  }
};

inline double h_prime(const ProtocolThresholds& th, double e_ph_tol) {
  const double h = binary_entropy(std::clamp(e_ph_tol, 0.0, 0.5));
  return th.n1_p2_tol * (1.0 - h) - 2.0 - (th.tag_av_bits + th.tag_bv_bits) - th.leak_ec;
}

// Variants of the intermediate-round term: leftover hashing with explicit MAC
// penalties, a compact MAC form, and plain two-universal hashing.
enum class SpFormula { leftover_mac, compact_mac, two_universal };

struct SecurityReport {
  double eps_ea = 0, eps_ms = 0, eps_ks = 0, eps_sp = 0;
  double eps_sec = 0, eps_sec_int = 0;
  double eps_rob = 0;
  double h_prime = 0;
  double e_ph_tol = 0;

  // Intermediate terms, kept for inspection and cross-variant comparison.
  double eps_phi1 = 0, eps_so = 0;
  double eps_p_core = 0;  // 2(eps_mac1 + eps_mac2 + eps_ds)
  double eps_p_prime = 0;
  double eps_ks_prime = 0, eps_sp_prime = 0;
  double eps_sp_mac1 = 0, eps_sp_mac2 = 0, eps_sp_pa = 0;
  double eps_smooth = 0;
  double eps_theta = 0;
  double ks_exponent = 0;  // bits of slack left by privacy amplification
  bool binding = true;
};

using FieldList = std::vector<std::pair<std::string, double>>;

inline FieldList report_fields(const SecurityReport& r) {
  return {{"eps_ea", r.eps_ea},
          {"eps_ms", r.eps_ms},
          {"eps_ks", r.eps_ks},
          {"eps_sp", r.eps_sp},
          {"eps_sec", r.eps_sec},
          {"eps_sec_int", r.eps_sec_int},
          {"eps_rob", r.eps_rob},
          {"h_prime", r.h_prime},
          {"e_ph_tol", r.e_ph_tol},
          {"eps_phi1", r.eps_phi1},
          {"eps_so", r.eps_so},
          {"eps_p_core", r.eps_p_core},
          {"eps_p_prime", r.eps_p_prime},
          {"eps_ks_prime", r.eps_ks_prime},
          {"eps_sp_prime", r.eps_sp_prime},
          {"eps_sp_mac1", r.eps_sp_mac1},
          {"eps_sp_mac2", r.eps_sp_mac2},
          {"eps_sp_pa", r.eps_sp_pa},
          {"eps_smooth", r.eps_smooth},
          {"eps_theta", r.eps_theta},
          {"ks_exponent", r.ks_exponent},
          {"binding", r.binding ? 1.0 : 0.0}};
}

inline FieldList threshold_fields(const ProtocolThresholds& t) {
  return {{"sift_tol", t.sift_tol},   {"n1_p2_tol", t.n1_p2_tol},     {"n1_p1_tol", t.n1_p1_tol},
          {"n0_p2_tol", t.n0_p2_tol}, {"e1_tol", t.e1_tol},           {"ebit_tol", t.ebit_tol},
          {"f_p1", t.f_p1},           {"tag_av_bits", t.tag_av_bits}, {"tag_bv_bits", t.tag_bv_bits},
          {"leak_ec", t.leak_ec},     {"l_kb", t.l_kb},               {"l_theta", t.l_theta}};
}

// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  for (int prec = 6; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

// One "key=value" line per field.
inline std::string to_kv(const FieldList& f) {
  std::string out;
  for (const auto& [k, v] : f) out += k + '=' + format_double(v) + '\n';
  return out;
}

inline std::string csv_header(const FieldList& f) {
  std::string out;
  for (const auto& [k, v] : f) out += (out.empty() ? "" : ",") + k;
  return out;
}

inline std::string csv_row(const FieldList& f) {
  std::string out;
  for (std::size_t i = 0; i < f.size(); ++i) out += (i ? "," : "") + format_double(f[i].second);
  return out;
}

inline SecurityReport report_from_kv(const std::string& text) {
  std::map<std::string, double> kv;
  std::size_t line = 0, pos = 0;
  while (pos < text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    const std::string l = text.substr(pos, end - pos);
    pos = end + 1;
    ++line;
    if (l.empty()) continue;
    const auto eq = l.find('=');
    if (eq == std::string::npos) throw ParseError(line, "expected key=value");
    char* stop = nullptr;
    const std::string val = l.substr(eq + 1);
    const double v = std::strtod(val.c_str(), &stop);
    if (val.empty() || *stop != '\0') throw ParseError(line, "bad number '" + val + "'");
    if (!kv.emplace(l.substr(0, eq), v).second) throw ParseError(line, "duplicate key");
  }
  SecurityReport r;
  const FieldList names = report_fields(r);
  for (const auto& [k, v] : kv)
    if (std::none_of(names.begin(), names.end(), [&](const auto& f) { return f.first == k; }))
      throw ParseError(0, "unknown key '" + k + "'");
  auto get = [&](const char* k) {
    const auto it = kv.find(k);
    if (it == kv.end()) throw ParseError(0, std::string("missing key '") + k + "'");
    return it->second;
  };
  r.eps_ea = get("eps_ea");
  r.eps_ms = get("eps_ms");
  r.eps_ks = get("eps_ks");
  r.eps_sp = get("eps_sp");
  r.eps_sec = get("eps_sec");
  r.eps_sec_int = get("eps_sec_int");
  r.eps_rob = get("eps_rob");
  r.h_prime = get("h_prime");
  r.e_ph_tol = get("e_ph_tol");
  r.eps_phi1 = get("eps_phi1");
  r.eps_so = get("eps_so");
  r.eps_p_core = get("eps_p_core");
  r.eps_p_prime = get("eps_p_prime");
  r.eps_ks_prime = get("eps_ks_prime");
  r.eps_sp_prime = get("eps_sp_prime");
  r.eps_sp_mac1 = get("eps_sp_mac1");
  r.eps_sp_mac2 = get("eps_sp_mac2");
  r.eps_sp_pa = get("eps_sp_pa");
  r.eps_smooth = get("eps_smooth");
  r.eps_theta = get("eps_theta");
  r.ks_exponent = get("ks_exponent");
  r.binding = get("binding") != 0.0;
  return r;
}

namespace detail {

// Smallest y' >= y with (x + y') - x == y' in floating point. The increase
// is at most one ulp of x + y.
inline double exact_addend(double x, double y) {
  auto ok = [&](double v) { return (x + v) - x == v; };
  if (ok(y)) return y;
  for (double u = std::nextafter(x, std::numeric_limits<double>::infinity()) - x; std::isfinite(u); u *= 2) {
    double v = std::ceil(y / u) * u;
    for (int k = 0; k < 4; ++k, v += u)
      if (ok(v)) return v;
  }
  return y;
}

// eps_sec is the plain sum of the first three entries. eps_sp alone is
// rounded up so that eps_sec_int - eps_sec reproduces it exactly.
inline void aggregate(SecurityReport& r) {
  r.eps_sec = r.eps_ea + r.eps_ms + r.eps_ks;
  if (std::isfinite(r.eps_sec) && std::isfinite(r.eps_sp)) r.eps_sp = exact_addend(r.eps_sec, r.eps_sp);
  r.eps_sec_int = r.eps_sec + r.eps_sp;
  r.binding = true;
  for (double v : {r.eps_ea, r.eps_ms, r.eps_ks, r.eps_sp, r.eps_sec, r.eps_sec_int})
    if (!(v <= 1.0)) r.binding = false;
}

inline double mac_excess(double tag_bits, double eps_mac) {
  return std::max(0.0, std::exp2(tag_bits) * eps_mac - 1.0);
}

}  // namespace detail

inline SecurityReport security_params_qake(const ProtocolThresholds& th, const EpsilonBudget& b,
                                           SpFormula formula = SpFormula::leftover_mac) {
  th.validate();
  b.validate();
  SecurityReport r;
  const double P = th.sift_tol;
  const double hf = binary_entropy(th.f_p1);
  const double tav = th.tag_av_bits, tbv = th.tag_bv_bits;
  r.eps_phi1 = b.eps_mac1 + std::exp2(-P * (1.0 + hf) + std::log2(P + 1.0));
  r.eps_so = std::exp2(-P) + std::exp2(-th.n1_p2_tol) + std::exp2(-P * hf + std::log2(P + 1.0));
  r.eps_p_core = 2.0 * (b.eps_mac1 + b.eps_mac2 + b.eps_ds());
  r.eps_p_prime = r.eps_p_core + 2.0 * r.eps_so;

  r.e_ph_tol = th.n1_p1_tol >= 1 && th.n1_p2_tol >= 1
                   ? phase_error_tol(th.e1_tol, th.n1_p1_tol, th.n1_p2_tol, b.eps_serf1, 1.0, PhaseVariant::plain)
                   : 0.5;
  r.h_prime = h_prime(th, r.e_ph_tol);
  r.eps_smooth = std::sqrt(2.0 * b.eps_serf1);
  r.ks_exponent = r.h_prime - th.l_kb;
  r.eps_ks_prime = 2.0 * r.eps_smooth + 0.5 * std::exp2(-0.5 * r.ks_exponent);

  const double ent = th.n1_p2_tol * (1.0 - binary_entropy(std::clamp(r.e_ph_tol, 0.0, 0.5)));
  switch (formula) {
    case SpFormula::leftover_mac:
      r.eps_sp_mac1 = std::sqrt(detail::mac_excess(tav, b.eps_mac1) +
                                std::exp2(std::log2(2.0 / b.eps3 + 1.0) + th.leak_ec + 2.0 + tav - ent));
      r.eps_sp_mac2 = std::sqrt(detail::mac_excess(tbv, b.eps_mac2) +
                                std::exp2(std::log2(2.0 / b.eps2 + 1.0) + th.leak_ec + 2.0 + tav + tbv - ent));
      r.eps_sp_prime = 4.0 * r.eps_smooth + 2.0 * (b.eps2 + b.eps3) + r.eps_sp_mac1 + r.eps_sp_mac2;
      break;
    case SpFormula::compact_mac:
      r.eps_sp_mac1 = std::sqrt(detail::mac_excess(tav, b.eps_mac1) +
                                std::exp2(std::log2((2.0 + b.eps3) / b.eps3) - tbv - r.h_prime));
      r.eps_sp_mac2 =
          std::sqrt(detail::mac_excess(tbv, b.eps_mac2) + std::exp2(std::log2(2.0 / b.eps2 + 1.0) - r.h_prime));
      r.eps_sp_prime = 4.0 * r.eps_smooth + 2.0 * (b.eps2 + b.eps3) + r.eps_sp_mac1 + r.eps_sp_mac2;
      break;
    case SpFormula::two_universal:
      r.eps_sp_prime =
          4.0 * r.eps_smooth + 0.5 * std::exp2(-0.5 * r.h_prime) * (1.0 + std::exp2(-0.5 * tav));
      break;
  }

  r.eps_ea = r.eps_phi1 + std::exp2(-tbv);
  r.eps_ms = b.eps_mac2;
  r.eps_ks = r.eps_ks_prime + r.eps_p_prime;
  r.eps_sp = r.eps_sp_prime + r.eps_p_prime;
  detail::aggregate(r);
  return r;
}

// With prng_terms=false the generator-related penalties are dropped (no seed
// guessing term, no IRNG phase-error correction), which is the analysis used
// for ordinary BB84 comparisons.
inline SecurityReport security_params_prng(const ProtocolThresholds& th, const EpsilonBudget& b, double n_pulses,
                                           bool prng_terms = true) {
  th.validate();
  b.validate();
  if (!(2.0 * th.l_theta < n_pulses)) throw DomainError("seed length must satisfy 2*l_theta < n");
  SecurityReport r;
  const double tav = th.tag_av_bits, tbv = th.tag_bv_bits;
  r.eps_theta = prng_terms ? b.eps_prng + std::exp2(-n_pulses + th.l_theta) : 0.0;
  r.eps_smooth = prng_terms ? std::sqrt(2.0 * (2.0 * b.eps_irng + b.eps_prng + b.eps_serf1))
                            : std::sqrt(2.0 * b.eps_serf1);
  r.eps_p_core = 2.0 * (b.eps_mac1 + b.eps_mac2 + b.eps_ds());
  r.eps_p_prime = r.eps_p_core + 2.0 * r.eps_theta;

  r.e_ph_tol = th.n1_p1_tol >= 1 && th.n1_p2_tol >= 1
                   ? phase_error_tol(th.e1_tol, th.n1_p1_tol, th.n1_p2_tol, b.eps_serf1, b.eps_irng,
                                     prng_terms ? PhaseVariant::prng : PhaseVariant::plain)
                   : 0.5;
  r.h_prime = h_prime(th, r.e_ph_tol);
  const double ent = th.n1_p2_tol * (1.0 - binary_entropy(std::clamp(r.e_ph_tol, 0.0, 0.5)));
  r.ks_exponent = r.h_prime - th.l_kb - th.l_theta;
  r.eps_ks_prime = 4.0 * r.eps_smooth + std::exp2(-0.5 * r.ks_exponent);
  r.eps_sp_pa = std::exp2(-0.5 * (ent - th.leak_ec - tav - tbv - th.l_kb - th.l_theta));
  r.eps_sp_mac1 = std::sqrt(detail::mac_excess(tav, b.eps_mac1) +
                            std::exp2(std::log2(2.0 / b.eps3 + 1.0) + th.leak_ec + 2.0 + tav - ent));
  r.eps_sp_mac2 = std::sqrt(detail::mac_excess(tbv, b.eps_mac2) +
                            std::exp2(std::log2(2.0 / b.eps2 + 1.0) + th.leak_ec + 2.0 + tav + tbv - ent));
  r.eps_sp_prime =
      10.0 * r.eps_smooth + 4.0 * (b.eps2 + b.eps3) + r.eps_sp_pa + r.eps_sp_mac1 + r.eps_sp_mac2;

  r.eps_ea = std::exp2(-tav) + std::exp2(-tbv);
  r.eps_ms = b.eps_mac2;
  r.eps_ks = r.eps_ks_prime + r.eps_p_prime;
  r.eps_sp = r.eps_sp_prime + r.eps_theta + r.eps_p_prime;
  detail::aggregate(r);
  return r;
}

using SecurityEvaluator = std::function<SecurityReport(const ProtocolThresholds&)>;

// Largest l_KB whose intermediate-round parameter stays within target; 0 when
// even an empty key misses it.
inline double max_key_length(const ProtocolThresholds& th, const SecurityEvaluator& eval, double target) {
  if (!(target > 0.0 && target <= 1.0)) throw DomainError("security target must lie in (0,1]");
  ProtocolThresholds t = th;
  t.l_kb = 0;
  const double h = eval(t).h_prime;
  if (!(h > 0)) return 0;
  auto ok = [&](double l) {
    t.l_kb = l;
    return eval(t).eps_sec_int <= target;
  };
  if (!ok(0)) return 0;
  double lo = 0, hi = std::floor(h) + 256;
  if (ok(hi)) return hi;
  while (hi - lo > 1) {
    const double mid = std::floor((lo + hi) / 2);
    (ok(mid) ? lo : hi) = mid;
  }
  return lo;
}

inline double max_key_length(const ProtocolThresholds& th, const EpsilonBudget& b, double target,
                             SpFormula formula = SpFormula::leftover_mac) {
  return max_key_length(th, [&](const ProtocolThresholds& t) { return security_params_qake(t, b, formula); }, target);
}

// ---------------------------------------------------------------------------
// Parameter-estimation statistics shared by the protocol and the optimizer.

struct SetCounts {
  std::array<double, 3> det{};  // clicks per intensity in the set
  std::array<double, 3> err{};  // bit errors per intensity in the set
  double size() const { return det[0] + det[1] + det[2]; }
  double errors() const { return err[0] + err[1] + err[2]; }
};

struct DecoyObservables {
  SetCounts test;  // P1
  SetCounts key;   // P2
  double sift_size = 0;
};

inline double estimate_n1_lb(const std::array<double, 3>& det, double eps, const SourceConfig& src,
                             ConcentrationMethod m) {
  const double n = det[0] + det[1] + det[2];
  IntensityBounds b;
  for (int j = 0; j < 3; ++j) {
    const auto iv = concentration_bounds(det[j], n, eps / 3.0, m);
    b.lower[j] = iv.lower;
    b.upper[j] = iv.upper;
  }
  return decoy_single_photon_lb(b, src);
}

inline double estimate_n0_lb(const std::array<double, 3>& det, double eps, const SourceConfig& src,
                             ConcentrationMethod m) {
  const double n = det[0] + det[1] + det[2];
  IntensityBounds b;
  for (int j : {1, 2}) {
    const auto iv = concentration_bounds(det[j], n, eps / 2.0, m);
    b.lower[j] = iv.lower;
    b.upper[j] = iv.upper;
  }
  return decoy_zero_photon_lb(b, src);
}

inline double estimate_e1_ub(const SetCounts& s, double eps, const SourceConfig& src, ConcentrationMethod m) {
  const double n = s.size();
  IntensityBounds b;
  for (int j : {1, 2}) {
    const auto iv = concentration_bounds(s.err[j], n, eps / 2.0, m);
    b.lower[j] = iv.lower;
    b.upper[j] = iv.upper;
  }
  return decoy_single_photon_error_ub(b, src, n).value;
}

struct PeEstimates {
  double n1_p2 = 0, n1_p1 = 0, n0_p2 = 0, e1_ub = 1.0, ebit = 1.0;
};

inline PeEstimates estimate_all(const DecoyObservables& obs, const DecoyEpsilons& eps, const SourceConfig& src,
                                ConcentrationMethod m) {
  PeEstimates e;
  e.n1_p2 = estimate_n1_lb(obs.key.det, eps.n1_p2, src, m);
  e.n1_p1 = estimate_n1_lb(obs.test.det, eps.n1_p1, src, m);
  e.n0_p2 = estimate_n0_lb(obs.key.det, eps.n0_p2, src, m);
  const double err1 = estimate_e1_ub(obs.test, eps.e1_p1, src, m);
  e.e1_ub = e.n1_p1 > 0 ? std::min(1.0, err1 / e.n1_p1) : 1.0;
  e.ebit = obs.test.size() > 0 ? obs.test.errors() / obs.test.size() : 1.0;
  return e;
}

// ---------------------------------------------------------------------------
// Robustness: probability that an honest run under the model fails a check.

// Per-pulse probabilities of each observable under an honest model.
struct ObservableModel {
  SourceConfig src;
  double n_pulses = 0;
  double q_sift = 0;
  std::array<double, 3> q_test{}, q_key{};          // click lands in P1 / P2 at intensity j
  std::array<double, 3> q_test_err{}, q_key_err{};  // and carries a bit error
};

enum class LeakMode { fraction, formula };

struct RobustnessReport {
  double sift = 0;     // sifted-count check
  double decoy = 0;    // decoy lower bounds
  double errors = 0;   // single-photon and overall test error rates
  double serf2 = 0;    // key-set error exceeding what reconciliation was sized for
  double ec = 0;
  double total = 0;
  bool reachable = true;
};

namespace detail {

inline double q_sum(const std::array<double, 3>& q) { return q[0] + q[1] + q[2]; }

// Worst plausible observables when every count sits at its eps-quantile in
// the direction that hurts the check.
inline double corner_n1(const ObservableModel& m, const std::array<double, 3>& q, double eps_q, double eps_ds,
                        ConcentrationMethod method) {
  std::array<double, 3> det{binomial_high_quantile(m.n_pulses, q[0], eps_q),
                            binomial_low_quantile(m.n_pulses, q[1], eps_q),
                            binomial_high_quantile(m.n_pulses, q[2], eps_q)};
  return estimate_n1_lb(det, eps_ds, m.src, method);
}

inline double corner_e1(const ObservableModel& m, double eps_q, const DecoyEpsilons& ds, ConcentrationMethod method) {
  SetCounts s;
  s.det = {binomial_high_quantile(m.n_pulses, m.q_test[0], eps_q), binomial_low_quantile(m.n_pulses, m.q_test[1], eps_q),
           binomial_high_quantile(m.n_pulses, m.q_test[2], eps_q)};
  s.err = {0.0, binomial_high_quantile(m.n_pulses, m.q_test_err[1], eps_q),
           binomial_low_quantile(m.n_pulses, m.q_test_err[2], eps_q)};
  const double n1 = estimate_n1_lb(s.det, ds.n1_p1, m.src, method);
  if (n1 <= 0) return 1.0;
  return std::min(1.0, estimate_e1_ub(s, ds.e1_p1, m.src, method) / n1);
}

inline double corner_ebit(const ObservableModel& m, double eps_q) {
  const double size = binomial_low_quantile(m.n_pulses, q_sum(m.q_test), eps_q);
  const double err = binomial_high_quantile(m.n_pulses, q_sum(m.q_test_err), eps_q);
  return size > 0 ? err / size : 1.0;
}

// Smallest per-count quantile level at which `passes` holds; the check then
// fails with probability at most k times that level. Returns 1 if even the
// median corner fails.
template <class F>
double robust_level(F passes, int k) {
  if (!passes(0.5)) return 1.0;
  double lo = -700.0, hi = std::log(0.5);  // natural-log bracket
  if (passes(std::exp(lo))) return k * std::exp(lo);
  for (int i = 0; i < 60; ++i) {
    const double mid = 0.5 * (lo + hi);
    (passes(std::exp(mid)) ? hi : lo) = mid;
  }
  return std::min(1.0, k * std::exp(hi));
}

}  // namespace detail

inline double ec_error_tolerance(const ProtocolThresholds& th, double test_size, double key_size, double eps_serf2) {
  return std::min(0.5, th.ebit_tol + serfling_correction(std::max(1.0, test_size), std::max(1.0, key_size), eps_serf2));
}

inline RobustnessReport robustness(const ObservableModel& m, const ProtocolThresholds& th, const EpsilonBudget& b,
                                   ConcentrationMethod method, LeakMode leak_mode) {
  RobustnessReport r;
  using detail::robust_level;
  r.sift = th.sift_tol <= 0 ? 0.0 : binomial_lower_tail(m.n_pulses, m.q_sift, th.sift_tol - 1).prob;
  if (th.sift_tol > m.n_pulses * m.q_sift) r.sift = 1.0;

  auto at_least = [](double v, double tol) { return tol <= 0 || v >= tol; };
  const double d_p2 = robust_level(
      [&](double e) { return at_least(detail::corner_n1(m, m.q_key, e, b.ds.n1_p2, method), th.n1_p2_tol); }, 3);
  const double d_p1 = robust_level(
      [&](double e) { return at_least(detail::corner_n1(m, m.q_test, e, b.ds.n1_p1, method), th.n1_p1_tol); }, 3);
  double d_p0 = 0;
  if (th.n0_p2_tol > 0)
    d_p0 = robust_level(
        [&](double e) {
          std::array<double, 3> det{binomial_high_quantile(m.n_pulses, m.q_key[0], e),
                                    binomial_high_quantile(m.n_pulses, m.q_key[1], e),
                                    binomial_low_quantile(m.n_pulses, m.q_key[2], e)};
          return estimate_n0_lb(det, b.ds.n0_p2, m.src, method) >= th.n0_p2_tol;
        },
        3);
  r.decoy = d_p2 + d_p1 + d_p0;

  const double e_1 = robust_level([&](double e) { return detail::corner_e1(m, e, b.ds, method) <= th.e1_tol; }, 5);
  const double e_b = robust_level([&](double e) { return detail::corner_ebit(m, e) <= th.ebit_tol; }, 2);
  r.errors = e_1 + e_b;
  r.serf2 = leak_mode == LeakMode::formula ? b.eps_serf2 : 0.0;
  r.ec = b.eps_ec;
  r.total = r.sift + r.decoy + r.errors + r.serf2 + r.ec;
  for (double v : {r.sift, d_p2, d_p1, d_p0, e_1, e_b})
    if (v >= 1.0) r.reachable = false;
  return r;
}

}  // namespace qake
