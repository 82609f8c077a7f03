#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qake/bits.hpp"
#include "qake/errors.hpp"
#include "qake/parallel.hpp"

namespace qake {

enum class Basis : std::uint8_t { Z = 0, X = 1 };

inline char basis_char(Basis b) { return b == Basis::Z ? 'Z' : 'X'; }

// Three-intensity decoy source. Index 0 is the signal, 1 the decoy, 2 the weakest (often vacuum).
struct SourceConfig {
  std::array<double, 3> mu{0.45, 0.225, 0.0};
  std::array<double, 3> probs{0.2, 0.6, 0.2};
  double basis_prob_x = 0.5;

  void validate() const {
    if (!(mu[0] > mu[1] && mu[1] > mu[2] && mu[2] >= 0.0))
      throw ConfigError("intensities must satisfy mu0 > mu1 > mu2 >= 0");
    if (!(mu[0] > mu[1] + mu[2])) throw ConfigError("intensities must satisfy mu0 > mu1 + mu2");
    double s = 0;
    for (double p : probs) {
      if (p < 0 || p > 1) throw ConfigError("intensity probability out of [0,1]");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ConfigError("intensity probabilities must sum to 1");
    if (!(basis_prob_x > 0 && basis_prob_x < 1)) throw ConfigError("basis probability must lie in (0,1)");
  }
};

struct ChannelConfig {
  double eta = 1.0;  // transmittance
  double qber = 0.0;
  double dark_count_prob = 0.0;
  double double_click_prob = 0.0;

  static ChannelConfig from_loss_db(double loss_db, double qber) {
    ChannelConfig c;
    c.eta = db_to_eta(loss_db);
    c.qber = qber;
    return c;
  }
  static double db_to_eta(double loss_db) { return std::pow(10.0, -loss_db / 10.0); }
  double loss_db() const { return -10.0 * std::log10(eta); }

  void validate() const {
    if (!(eta >= 0 && eta <= 1)) throw ConfigError("transmittance must lie in [0,1]");
    if (!(qber >= 0 && qber <= 0.5)) throw ConfigError("qber must lie in [0,0.5]");
    if (!(dark_count_prob >= 0 && dark_count_prob <= 1)) throw ConfigError("dark count probability out of range");
    if (!(double_click_prob >= 0 && double_click_prob <= 1)) throw ConfigError("double click probability out of range");
  }
};

struct PulseRecord {
  std::uint32_t index = 0;
  std::uint8_t intensity = 0;
  Basis basis = Basis::Z;
  std::uint8_t bit = 0;
  bool operator==(const PulseRecord&) const = default;
};

struct DetectionRecord {
  static constexpr std::int8_t kNoClick = -1;
  std::uint32_t index = 0;
  bool detected = false;
  Basis basis = Basis::Z;
  std::int8_t bit = kNoClick;
  bool operator==(const DetectionRecord&) const = default;
};

struct RawSessionData {
  std::vector<PulseRecord> pulses;
  std::vector<DetectionRecord> detections;

  std::size_t n() const { return pulses.size(); }
  bool operator==(const RawSessionData&) const = default;

  void validate() const {
    if (pulses.size() != detections.size()) throw FormatError("pulse and detection records differ in length");
    for (std::size_t i = 0; i < pulses.size(); ++i) {
      const auto& p = pulses[i];
      const auto& d = detections[i];
      if (p.index != i || d.index != i) throw FormatError("record " + std::to_string(i) + " is misaligned");
      if (p.intensity > 2 || p.bit > 1) throw FormatError("pulse record " + std::to_string(i) + " out of domain");
      if (d.detected != (d.bit != DetectionRecord::kNoClick))
        throw FormatError("record " + std::to_string(i) + ": click flag and bit disagree");
      if (d.bit > 1) throw FormatError("detection record " + std::to_string(i) + " out of domain");
    }
  }
};

// Optional externally chosen bases (bit 1 = X), e.g. from a seeded generator.
struct BasisOverride {
  const BitString* alice = nullptr;
  const BitString* bob = nullptr;
};

inline double detection_prob(double eta, double mu, double dark = 0.0) {
  return 1.0 - (1.0 - dark) * std::exp(-eta * mu);
}

template <class R>
std::pair<PulseRecord, DetectionRecord> simulate_round(const SourceConfig& src, const ChannelConfig& ch, R& rng,
                                                       std::uint32_t index = 0,
                                                       std::optional<Basis> alice_basis = std::nullopt,
                                                       std::optional<Basis> bob_basis = std::nullopt) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  // A fixed number of draws per round keeps the stream aligned regardless of outcome.
  const double r_int = u(rng), r_ba = u(rng), r_bit = u(rng), r_bb = u(rng), r_det = u(rng), r_err = u(rng),
               r_dc = u(rng);

  PulseRecord p;
  p.index = index;
  p.intensity = r_int < src.probs[0] ? 0 : (r_int < src.probs[0] + src.probs[1] ? 1 : 2);
  p.basis = alice_basis ? *alice_basis : (r_ba < src.basis_prob_x ? Basis::X : Basis::Z);
  p.bit = r_bit < 0.5 ? 0 : 1;

  DetectionRecord d;
  d.index = index;
  d.basis = bob_basis ? *bob_basis : (r_bb < src.basis_prob_x ? Basis::X : Basis::Z);
  if (r_det < detection_prob(ch.eta, src.mu[p.intensity], ch.dark_count_prob)) {
    d.detected = true;
    if (d.basis != p.basis || r_dc < ch.double_click_prob)
      d.bit = r_err < 0.5 ? 0 : 1;
    else
      d.bit = static_cast<std::int8_t>(p.bit ^ (r_err < ch.qber ? 1 : 0));
  }
  return {p, d};
}

inline constexpr std::size_t kShardRounds = 1u << 16;

// Rounds are grouped in fixed shards, each driven by a sub-seed derived from
// (seed, shard), so the output does not depend on how shards are scheduled.
inline RawSessionData simulate_session(const SourceConfig& src, const ChannelConfig& ch, std::size_t n,
                                       std::uint64_t seed, BasisOverride bases = {}) {
  src.validate();
  ch.validate();
  if (n == 0) throw ConfigError("session needs at least one round");
  if ((bases.alice && bases.alice->size() < n) || (bases.bob && bases.bob->size() < n))
    throw DimensionError("basis override shorter than the session");
  RawSessionData raw;
  raw.pulses.resize(n);
  raw.detections.resize(n);
  const std::size_t shards = (n + kShardRounds - 1) / kShardRounds;
  parallel_for(shards, [&](std::size_t shard) {
    Rng rng(derive_seed(seed, shard));
    const std::size_t end = std::min(n, (shard + 1) * kShardRounds);
    for (std::size_t i = shard * kShardRounds; i < end; ++i) {
      std::optional<Basis> ab, bb;
      if (bases.alice) ab = bases.alice->get(i) ? Basis::X : Basis::Z;
      if (bases.bob) bb = bases.bob->get(i) ? Basis::X : Basis::Z;
      auto [p, d] = simulate_round(src, ch, rng, static_cast<std::uint32_t>(i), ab, bb);
      raw.pulses[i] = p;
      raw.detections[i] = d;
    }
  });
  return raw;
}

// Drops clicks of the over-represented measurement basis, chosen uniformly,
// until both bases hold the same number of clicks.
inline RawSessionData post_select_balance(const RawSessionData& raw, std::uint64_t seed) {
  if (raw.n() == 0) throw ConfigError("post-selection needs nonempty data");
  RawSessionData out = raw;
  std::vector<std::size_t> z, x;
  for (std::size_t i = 0; i < raw.detections.size(); ++i) {
    const auto& d = raw.detections[i];
    if (!d.detected) continue;
    (d.basis == Basis::Z ? z : x).push_back(i);
  }
  auto& big = z.size() > x.size() ? z : x;
  const std::size_t drop = big.size() - std::min(z.size(), x.size());
  Rng rng(seed);
  // Partial Fisher-Yates: the first `drop` entries become a uniform subset.
  for (std::size_t k = 0; k < drop; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, big.size() - 1);
    std::swap(big[k], big[pick(rng)]);
    auto& d = out.detections[big[k]];
    d.detected = false;
    d.bit = DetectionRecord::kNoClick;
  }
  return out;
}

inline std::string format_raw_line(const PulseRecord& p, const DetectionRecord& d) {
  std::string s = std::to_string(p.index) + ' ' + std::to_string(p.intensity) + ' ' + basis_char(p.basis) + ' ' +
                  std::to_string(p.bit) + ' ' + basis_char(d.basis) + ' ';
  s += d.bit == DetectionRecord::kNoClick ? std::string("-") : std::to_string(d.bit);
  return s;
}

inline void save_raw_data(const RawSessionData& raw, std::ostream& os) {
  for (std::size_t i = 0; i < raw.n(); ++i) os << format_raw_line(raw.pulses[i], raw.detections[i]) << '\n';
}

inline void save_raw_data(const RawSessionData& raw, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot open " + path + " for writing");
  save_raw_data(raw, os);
}

// One round per line: `index v basis_a bit_a basis_b bit_b`, bit_b in {0,1,-}.
// An optional seventh column carries an explicit click flag, checked against bit_b.
inline RawSessionData load_raw_data(std::istream& is) {
  RawSessionData raw;
  std::string line;
  std::size_t lineno = 0;
  auto parse_basis = [&](const std::string& t) {
    if (t == "Z") return Basis::Z;
    if (t == "X") return Basis::X;
    throw ParseError(lineno, "bad basis '" + t + "'");
  };
  auto parse_bit = [&](const std::string& t) -> std::uint8_t {
    if (t == "0") return 0;
    if (t == "1") return 1;
    throw ParseError(lineno, "bad bit '" + t + "'");
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::vector<std::string> f;
    for (std::string t; ls >> t;) f.push_back(t);
    if (f.size() != 6 && f.size() != 7) throw ParseError(lineno, "expected 6 fields, got " + std::to_string(f.size()));
    PulseRecord p;
    DetectionRecord d;
    std::size_t idx = 0;
    try {
      std::size_t used = 0;
      idx = std::stoul(f[0], &used);
      if (used != f[0].size()) throw std::invalid_argument("index");
    } catch (const std::exception&) {
      throw ParseError(lineno, "bad index '" + f[0] + "'");
    }
    if (f[1] != "0" && f[1] != "1" && f[1] != "2") throw ParseError(lineno, "bad intensity label '" + f[1] + "'");
    p.index = d.index = static_cast<std::uint32_t>(idx);
    p.intensity = static_cast<std::uint8_t>(f[1][0] - '0');
    p.basis = parse_basis(f[2]);
    p.bit = parse_bit(f[3]);
    d.basis = parse_basis(f[4]);
    if (f[5] == "-") {
      d.detected = false;
      d.bit = DetectionRecord::kNoClick;
    } else {
      d.detected = true;
      d.bit = static_cast<std::int8_t>(parse_bit(f[5]));
    }
    if (f.size() == 7) {
      if (f[6] != "0" && f[6] != "1") throw ParseError(lineno, "bad click flag '" + f[6] + "'");
      if ((f[6] == "1") != d.detected) throw FormatError("line " + std::to_string(lineno) + ": click flag and bit disagree");
    }
    if (idx != raw.pulses.size())
      throw FormatError("line " + std::to_string(lineno) + ": index " + std::to_string(idx) + " out of sequence");
    raw.pulses.push_back(p);
    raw.detections.push_back(d);
  }
  return raw;
}

inline RawSessionData load_raw_data(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open " + path);
  return load_raw_data(is);
}

}  // namespace qake
