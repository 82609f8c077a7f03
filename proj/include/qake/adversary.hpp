#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "qake/bits.hpp"
#include "qake/errors.hpp"
#include "qake/finite_key.hpp"
#include "qake/protocol.hpp"

namespace qake {

// ---------------------------------------------------------------------------
// Strategies. Each one acts only through the message hook, which sees
// in-flight messages and never either party's secrets.

struct Passive {};

// Flips one payload bit of the first message of `kind` (optionally only in
// one direction). Without a fixed position a fresh one is drawn per trial.
struct TamperField {
  MessageKind kind = MessageKind::TagAV;
  std::optional<std::size_t> bit;
  std::optional<Direction> dir;
};

// Substitutes a TagAV recorded from an earlier session.
struct ReplayTag {
  std::optional<Bytes> recorded;
};

// The named role is played by a party holding fresh random secrets.
struct ImpersonateAlice {};
struct ImpersonateBob {};

// Raises the label Alice announces to Bob by `offset`.
struct DesyncLabels {
  std::uint32_t offset = 1;
};

// Drops the first message of `kind`.
struct DropMessage {
  MessageKind kind = MessageKind::TagBV;
};

using AttackStrategy =
    std::variant<Passive, TamperField, ReplayTag, ImpersonateAlice, ImpersonateBob, DesyncLabels, DropMessage>;

inline std::string strategy_name(const AttackStrategy& s) {
  struct {
    std::string operator()(const Passive&) const { return "passive"; }
    std::string operator()(const TamperField& t) const { return std::string("tamper:") + to_string(t.kind); }
    std::string operator()(const ReplayTag&) const { return "replay-tag"; }
    std::string operator()(const ImpersonateAlice&) const { return "impersonate-alice"; }
    std::string operator()(const ImpersonateBob&) const { return "impersonate-bob"; }
    std::string operator()(const DesyncLabels& d) const { return "desync-labels:" + std::to_string(d.offset); }
    std::string operator()(const DropMessage& d) const { return std::string("drop:") + to_string(d.kind); }
  } v;
  return std::visit(v, s);
}

inline MessageKind parse_message_kind(const std::string& s) {
  for (int k = 0; k <= static_cast<int>(MessageKind::TagBV); ++k)
    if (s == to_string(static_cast<MessageKind>(k))) return static_cast<MessageKind>(k);
  throw ConfigError("unknown message kind '" + s + "'");
}

// Forms: passive, replay-tag, impersonate-alice, impersonate-bob,
// desync-labels[:offset], drop:<Kind>, tamper:<Kind>[:bit].
inline AttackStrategy parse_strategy(const std::string& spec) {
  const auto colon = spec.find(':');
  const std::string head = spec.substr(0, colon);
  const std::string rest = colon == std::string::npos ? "" : spec.substr(colon + 1);
  auto to_uint = [&](const std::string& t) -> std::uint64_t {
    std::size_t used = 0;
    std::uint64_t v = 0;
    if (t.empty() || t[0] < '0' || t[0] > '9') throw ConfigError("bad number '" + t + "' in strategy");
    try {
      v = std::stoull(t, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != t.size()) throw ConfigError("bad number '" + t + "' in strategy");
    return v;
  };
  if (head == "passive" && rest.empty()) return Passive{};
  if (head == "replay-tag" && rest.empty()) return ReplayTag{};
  if (head == "impersonate-alice" && rest.empty()) return ImpersonateAlice{};
  if (head == "impersonate-bob" && rest.empty()) return ImpersonateBob{};
  if (head == "desync-labels") {
    const auto off = rest.empty() ? 1 : to_uint(rest);
    if (off == 0 || off > 0xffffu) throw ConfigError("label offset must lie in [1, 65535]");
    return DesyncLabels{static_cast<std::uint32_t>(off)};
  }
  if (head == "drop") return DropMessage{parse_message_kind(rest)};
  if (head == "tamper") {
    const auto c2 = rest.find(':');
    TamperField t;
    t.kind = parse_message_kind(rest.substr(0, c2));
    if (c2 != std::string::npos) t.bit = static_cast<std::size_t>(to_uint(rest.substr(c2 + 1)));
    return t;
  }
  throw ConfigError("unknown strategy '" + spec + "'");
}

namespace detail {

class StrategyHook final : public MessageHook {
 public:
  StrategyHook(AttackStrategy& s, std::uint64_t seed) : s_(s), rng_(seed) {}

  std::optional<ProtocolMessage> on_message(const ProtocolMessage& msg, Direction dir) override {
    ProtocolMessage out = msg;
    if (auto* t = std::get_if<TamperField>(&s_)) {
      if (!done_ && msg.kind == t->kind && (!t->dir || *t->dir == dir) && !msg.payload.empty()) {
        const std::size_t nbits = msg.payload.size() * 8;
        const std::size_t pos = t->bit ? *t->bit % nbits : std::uniform_int_distribution<std::size_t>(0, nbits - 1)(rng_);
        out.payload[pos / 8] ^= static_cast<std::uint8_t>(1u << (pos % 8));
        done_ = true;
      }
    } else if (auto* r = std::get_if<ReplayTag>(&s_)) {
      if (msg.kind == MessageKind::TagAV) {
        if (r->recorded)
          out.payload = *r->recorded;
        else
          r->recorded = msg.payload;
      }
    } else if (auto* d = std::get_if<DesyncLabels>(&s_)) {
      if (msg.kind == MessageKind::LabelAnnounce && dir == Direction::alice_to_bob && msg.payload.size() == 4) {
        std::size_t off = 0;
        const std::uint64_t raised = std::uint64_t{get_u32(msg.payload, off)} + d->offset;
        out.payload.clear();
        put_u32(out.payload, static_cast<std::uint32_t>(std::min<std::uint64_t>(raised, 0xffffffffu)));
      }
    } else if (auto* dm = std::get_if<DropMessage>(&s_)) {
      if (!done_ && msg.kind == dm->kind) {
        done_ = true;
        return std::nullopt;
      }
    }
    return out;
  }

 private:
  AttackStrategy& s_;
  Rng rng_;
  bool done_ = false;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Statistics.

struct Interval {
  double lower = 0, upper = 1;
};

inline constexpr double kZ99 = 2.5758293035489004;

inline Interval wilson_interval(std::uint64_t k, std::uint64_t n, double z = kZ99) {
  if (n == 0) return {0.0, 1.0};
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(k) / nn;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / nn;
  const double centre = (p + z2 / (2.0 * nn)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn)) / denom;
  return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

inline std::size_t outcome_index(Outcome o) { return static_cast<std::size_t>(static_cast<int>(o) + 1); }
inline Outcome outcome_at(std::size_t i) { return static_cast<Outcome>(static_cast<int>(i) - 1); }

struct TrialStats {
  std::uint64_t trials = 0;
  std::array<std::array<std::uint64_t, 3>, 3> counts{};  // [f_a][f_b], index 0 = phi
  std::uint64_t key_mismatch_accepts = 0;
  std::uint64_t structural_failures = 0;

  std::uint64_t count(Outcome a, Outcome b) const { return counts[outcome_index(a)][outcome_index(b)]; }
  std::uint64_t count_a(Outcome a) const {
    const auto& r = counts[outcome_index(a)];
    return r[0] + r[1] + r[2];
  }
  std::uint64_t count_b(Outcome b) const {
    std::uint64_t s = 0;
    for (const auto& r : counts) s += r[outcome_index(b)];
    return s;
  }
  double freq(Outcome a, Outcome b) const {
    return trials ? static_cast<double>(count(a, b)) / static_cast<double>(trials) : 0.0;
  }
  Interval ci(Outcome a, Outcome b) const { return wilson_interval(count(a, b), trials); }

  void add(const SessionOutcome& o) {
    ++trials;
    ++counts[outcome_index(o.f_a)][outcome_index(o.f_b)];
    if (o.f_a == Outcome::one && o.f_b == Outcome::one && o.k_a && o.k_b && *o.k_a != *o.k_b) ++key_mismatch_accepts;
    if (o.structural_failure) ++structural_failures;
  }

  void merge(const TrialStats& s) {
    trials += s.trials;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) counts[i][j] += s.counts[i][j];
    key_mismatch_accepts += s.key_mismatch_accepts;
    structural_failures += s.structural_failures;
  }

  bool operator==(const TrialStats&) const = default;
};

struct TrialOptions {
  const RawSessionData* raw = nullptr;  // fixed quantum data for the plain variant
  std::uint32_t mask_keys = 4;
};

// Runs `trials` independent rounds, each between parties that start from
// label 1 with secrets drawn from the trial seed, with the strategy as the
// in-flight hook. The impersonation strategies hand one role to a party whose
// secrets are drawn independently.
inline TrialStats run_trials(const AttackStrategy& strategy, const SessionConfig& cfg, std::uint64_t trials,
                             std::uint64_t seed, const TrialOptions& opt = {}) {
  if (trials == 0) throw ConfigError("need at least one trial");
  cfg.validate();
  const SecretsConfig sc = cfg.secrets_config(opt.mask_keys);
  AttackStrategy state = strategy;
  const bool imp_a = std::holds_alternative<ImpersonateAlice>(strategy);
  const bool imp_b = std::holds_alternative<ImpersonateBob>(strategy);
  TrialStats stats;
  for (std::uint64_t t = 0; t < trials; ++t) {
    const std::uint64_t ts = derive_seed(seed, t + 1);
    detail::StrategyHook hook(state, derive_seed(ts, 1));
    Rng srng(derive_seed(ts, 2));
    PartyState alice = PartyState::make(Role::alice, SharedSecrets::generate(sc, srng));
    PartyState bob = PartyState::make(Role::bob, alice.secrets);
    if (imp_a || imp_b) {
      Rng irng(derive_seed(ts, 3));
      PartyState& role = imp_a ? alice : bob;
      role.secrets = SharedSecrets::generate(sc, irng);
      role.impostor = true;
    }
    stats.add(run_session(cfg, alice, bob, ts, &hook, opt.raw));
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Comparison with analytic bounds.

struct BoundVerdict {
  std::string condition;
  std::uint64_t events = 0, trials = 0;
  double frequency = 0;
  Interval ci;
  double bound = 0;
  bool pass = false;
  bool underpowered = false;
};

// Bounds available at toy scale. The message-guessing part of the
// entity-authentication parameter is reported apart from the forgery bound.
struct ToyBounds {
  double forge_av = 0;        // F_B = 1 against an impostor Alice
  double forge_bv = 0;        // F_A = 1 against an impostor Bob
  double match = 0;           // both accept with different keys
  double undetected = 0;      // both accept after an active change to the transcript
  double robustness = 0;      // honest run not accepted by both
  double message_guess = 0;   // reported only

  static ToyBounds from_report(const SecurityReport& r, const ProtocolThresholds& th, const EpsilonBudget& b,
                               double eps_rob) {
    ToyBounds t;
    t.forge_av = std::exp2(-th.tag_av_bits);
    t.forge_bv = std::exp2(-th.tag_bv_bits);
    t.match = b.eps_mac2;
    t.undetected = std::max(t.forge_av, t.forge_bv);
    t.robustness = eps_rob;
    t.message_guess = std::max(0.0, r.eps_phi1 - b.eps_mac1);
    return t;
  }

  static ToyBounds for_tags(double tav, double tbv, double eps_rob) {
    ToyBounds t;
    t.forge_av = std::exp2(-tav);
    t.forge_bv = std::exp2(-tbv);
    t.match = t.forge_bv;
    t.undetected = std::max(t.forge_av, t.forge_bv);
    t.robustness = eps_rob;
    return t;
  }
};

inline BoundVerdict compare(const std::string& name, std::uint64_t events, std::uint64_t trials, double bound) {
  BoundVerdict v;
  v.condition = name;
  v.events = events;
  v.trials = trials;
  v.frequency = trials ? static_cast<double>(events) / static_cast<double>(trials) : 0.0;
  v.ci = wilson_interval(events, trials);
  v.bound = bound;
  // The bound is not contradicted while it stays above the interval's low end.
  v.pass = v.ci.lower <= bound;
  // A zero-event run cannot resolve a bound smaller than its own upper limit.
  v.underpowered = wilson_interval(0, trials).upper > std::max(bound, 1e-300) * 10.0;
  return v;
}

inline std::vector<BoundVerdict> check_bounds(const AttackStrategy& s, const TrialStats& st, const ToyBounds& b) {
  std::vector<BoundVerdict> out;
  const std::uint64_t n = st.trials;
  const std::uint64_t both = st.count(Outcome::one, Outcome::one);
  if (std::holds_alternative<ImpersonateAlice>(s)) {
    out.push_back(compare("forge_av", st.count_b(Outcome::one), n, b.forge_av));
  } else if (std::holds_alternative<ImpersonateBob>(s)) {
    out.push_back(compare("forge_bv", st.count_a(Outcome::one), n, b.forge_bv));
  } else if (std::holds_alternative<Passive>(s)) {
    out.push_back(compare("robustness", n - both, n, b.robustness));
  } else {
    out.push_back(compare("undetected", both, n, b.undetected));
  }
  if (!std::holds_alternative<ImpersonateAlice>(s) && !std::holds_alternative<ImpersonateBob>(s))
    out.push_back(compare("match", st.key_mismatch_accepts, n, b.match));
  return out;
}

inline std::string trial_csv(const AttackStrategy& s, const TrialStats& st, const std::vector<BoundVerdict>& v) {
  std::string out = "strategy,f_a,f_b,count,frequency,ci_low,ci_high\n";
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      const auto a = outcome_at(i), b = outcome_at(j);
      const auto ci = st.ci(a, b);
      out += strategy_name(s) + ',' + to_string(a) + ',' + to_string(b) + ',' + std::to_string(st.count(a, b)) + ',' +
             std::to_string(st.freq(a, b)) + ',' + std::to_string(ci.lower) + ',' + std::to_string(ci.upper) + '\n';
    }
  out += "condition,events,trials,frequency,ci_low,ci_high,bound,verdict\n";
  for (const auto& x : v) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%llu,%llu,%.6g,%.6g,%.6g,%.6g,%s%s\n", x.condition.c_str(),
                  static_cast<unsigned long long>(x.events), static_cast<unsigned long long>(x.trials), x.frequency,
                  x.ci.lower, x.ci.upper, x.bound, x.pass ? "pass" : "fail", x.underpowered ? " (underpowered)" : "");
    out += buf;
  }
  return out;
}

}  // namespace qake
