#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qake/bits.hpp"
#include "qake/crypto.hpp"
#include "qake/error_correction.hpp"
#include "qake/errors.hpp"
#include "qake/finite_key.hpp"
#include "qake/hashing.hpp"
#include "qake/keyrate.hpp"
#include "qake/quantum_channel.hpp"

namespace qake {

enum class ProtocolVariant { qake, prng };

inline ProtocolVariant parse_protocol_variant(const std::string& s) {
  if (s == "qake") return ProtocolVariant::qake;
  if (s == "prng") return ProtocolVariant::prng;
  throw ConfigError("unknown protocol variant '" + s + "'");
}

enum class Role { alice, bob };

// F in {phi, 0, 1}; phi marks a role not played by the honest party.
enum class Outcome : std::int8_t { phi = -1, zero = 0, one = 1 };

inline const char* to_string(Outcome o) {
  return o == Outcome::phi ? "phi" : (o == Outcome::zero ? "0" : "1");
}

enum class Decision : std::int8_t { unset = -1, zero = 0, one = 1 };

using IndexSet = std::vector<std::uint32_t>;  // strictly increasing

// ---------------------------------------------------------------------------
// Seeded basis generator.

inline BitString prng_expand_basis(const BitString& seed, std::size_t n) {
  if (seed.size() < 128) throw ConfigError("basis seed must hold at least 128 bits");
  if (!(2 * seed.size() < n)) throw ConfigError("basis expansion needs n > 2 * seed length");
  Bytes key;
  serialize_into(key, seed);
  const Bytes stream = aes_ctr_stream(key, (n + 7) / 8);
  return BitString::from_bytes(stream, n);
}

// ---------------------------------------------------------------------------
// Shared secrets.

struct SecretsConfig {
  std::size_t tag_av_bits = 80;
  std::size_t tag_bv_bits = 80;
  std::size_t h1_capacity = 1 << 16;  // message bits accepted by h1
  std::size_t h2_capacity = 1 << 14;  // by h2, including its leading constant bit
  std::size_t pa_capacity = 1 << 14;  // privacy amplification input bits
  std::size_t pa_out = 64;            // key bits plus refreshed seed bits
  std::size_t mask_count = 64;
  std::size_t l_theta = 0;            // basis seed bits, 0 without the generator variant
};

struct SharedSecrets {
  ToeplitzSeed k1_hash;
  ToeplitzSeed k2;
  ToeplitzSeed pa_seed;
  std::vector<MaskKey> mask_keys;     // label j uses mask_keys[j-1]
  std::vector<BitString> basis_seeds; // label j uses basis_seeds[j-1]

  bool operator==(const SharedSecrets&) const = default;

  template <class R>
  static SharedSecrets generate(const SecretsConfig& c, R& rng) {
    SharedSecrets s;
    s.k1_hash = ToeplitzSeed::random(c.tag_av_bits, c.h1_capacity, rng);
    s.k2 = ToeplitzSeed::random(c.tag_bv_bits, c.h2_capacity, rng);
    s.pa_seed = ToeplitzSeed::random(c.pa_out, c.pa_capacity, rng);
    for (std::size_t j = 0; j < c.mask_count; ++j) s.mask_keys.push_back({BitString::random(c.tag_av_bits, rng)});
    if (c.l_theta > 0)
      for (std::size_t j = 0; j < c.mask_count; ++j) s.basis_seeds.push_back(BitString::random(c.l_theta, rng));
    return s;
  }

  Bytes serialize() const {
    Bytes out;
    serialize_into(out, k1_hash);
    serialize_into(out, k2);
    serialize_into(out, pa_seed);
    put_u32(out, static_cast<std::uint32_t>(mask_keys.size()));
    for (const auto& m : mask_keys) serialize_into(out, m.value);
    put_u32(out, static_cast<std::uint32_t>(basis_seeds.size()));
    for (const auto& b : basis_seeds) serialize_into(out, b);
    return out;
  }

  static SharedSecrets deserialize(std::span<const std::uint8_t> in) {
    std::size_t off = 0;
    SharedSecrets s;
    s.k1_hash = deserialize_seed(in, off);
    s.k2 = deserialize_seed(in, off);
    s.pa_seed = deserialize_seed(in, off);
    const std::uint32_t m = get_u32(in, off);
    for (std::uint32_t j = 0; j < m; ++j) s.mask_keys.push_back({deserialize_bits(in, off)});
    const std::uint32_t b = get_u32(in, off);
    for (std::uint32_t j = 0; j < b; ++j) s.basis_seeds.push_back(deserialize_bits(in, off));
    if (off != in.size()) throw FormatError("trailing bytes after secrets");
    for (const auto& mk : s.mask_keys)
      if (mk.value.size() != s.k1_hash.out_len) throw FormatError("mask key length differs from tag length");
    return s;
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot open " + path + " for writing");
    const Bytes b = serialize();
    os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  }

  static SharedSecrets load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open " + path);
    Bytes b((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return deserialize(b);
  }
};

// Record of which mask keys a party has queried. Indices below the party's
// label are retired and must never be queried again.
struct MaskKeyLedger {
  struct Use {
    std::uint64_t round = 0;
    std::uint32_t index = 0;
    std::uint32_t label = 0;  // the party's label when the key was queried
  };
  std::vector<Use> uses;

  void record(std::uint64_t round, std::uint32_t index, std::uint32_t label) {
    if (index < label) throw DomainError("mask key below the label watermark");
    for (const auto& u : uses)
      if (u.round == round) throw DomainError("mask key queried twice in one round");
    uses.push_back({round, index, label});
  }
};

struct PartyState {
  Role role = Role::alice;
  std::uint32_t label = 1;
  SharedSecrets secrets;
  MaskKeyLedger mask_ledger;
  std::uint64_t rounds = 0;
  bool impostor = false;  // plays the role without the legitimate secrets

  static PartyState make(Role r, SharedSecrets s, std::uint32_t label = 1) {
    PartyState p;
    p.role = r;
    p.secrets = std::move(s);
    p.label = label;
    return p;
  }
};

// ---------------------------------------------------------------------------
// Messages.

enum class MessageKind : std::uint8_t {
  LabelAnnounce,
  QuantumBlock,
  DetectAndBasis,
  SiftAnnounce,
  TestAnnounce,
  Syndrome,
  TagAV,
  TagBV
};

inline const char* to_string(MessageKind k) {
  switch (k) {
    case MessageKind::LabelAnnounce: return "LabelAnnounce";
    case MessageKind::QuantumBlock: return "QuantumBlock";
    case MessageKind::DetectAndBasis: return "DetectAndBasis";
    case MessageKind::SiftAnnounce: return "SiftAnnounce";
    case MessageKind::TestAnnounce: return "TestAnnounce";
    case MessageKind::Syndrome: return "Syndrome";
    case MessageKind::TagAV: return "TagAV";
    case MessageKind::TagBV: return "TagBV";
  }
  return "?";
}

enum class Direction : std::uint8_t { alice_to_bob, bob_to_alice };

struct ProtocolMessage {
  MessageKind kind = MessageKind::LabelAnnounce;
  Bytes payload;
  bool operator==(const ProtocolMessage&) const = default;
};

struct LoggedMessage {
  Direction dir = Direction::alice_to_bob;
  ProtocolMessage sent;
  std::optional<ProtocolMessage> delivered;
};

inline void put_index_set(Bytes& out, const IndexSet& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  for (auto i : s) put_u32(out, i);
}

inline IndexSet get_index_set(std::span<const std::uint8_t> in, std::size_t& off, std::size_t universe) {
  const std::uint32_t n = get_u32(in, off);
  if (n > universe) throw FormatError("index set larger than its universe");
  IndexSet s(n);
  for (std::uint32_t k = 0; k < n; ++k) {
    s[k] = get_u32(in, off);
    if (s[k] >= universe) throw FormatError("index out of range");
    if (k > 0 && s[k] <= s[k - 1]) throw FormatError("index set not strictly increasing");
  }
  return s;
}

inline void expect_consumed(std::span<const std::uint8_t> in, std::size_t off) {
  if (off != in.size()) throw FormatError("trailing bytes in message");
}

// Fields hashed into the validation tag, as one party sees them.
struct TranscriptFields {
  BitString x_p2;      // own (Alice) or corrected (Bob) key-set bits
  IndexSet detected;   // P
  BitString bases_p;   // Bob's bases on P, 1 = X
  IndexSet sifted;     // P^sift
  BitString x_p1;      // Bob's test bits
  IndexSet test;       // P1
  IndexSet key;        // P2
  Bytes syndrome;      // s
};

inline BitString bytes_as_bits(const Bytes& b) { return BitString::from_bytes(b); }

inline BitString membership(const IndexSet& s, std::size_t universe) {
  BitString out(universe);
  for (auto i : s) out.set(i, true);
  return out;
}

// Canonical encoding over n rounds: index sets as n-bit membership maps, bit
// strings as u32 bit count + packed bits, little-endian and LSB-first.
inline BitString validation_message(ProtocolVariant v, const TranscriptFields& f, std::size_t n) {
  Bytes out;
  if (v == ProtocolVariant::qake) {
    serialize_into(out, f.x_p2);
    serialize_into(out, membership(f.detected, n));
    serialize_into(out, f.bases_p);
    serialize_into(out, membership(f.sifted, n));
    serialize_into(out, f.x_p1);
    serialize_into(out, membership(f.test, n));
    serialize_into(out, membership(f.key, n));
    serialize_into(out, bytes_as_bits(f.syndrome));
  } else {
    serialize_into(out, f.x_p1);
    serialize_into(out, membership(f.test, n));
    serialize_into(out, membership(f.key, n));
    serialize_into(out, f.x_p2);
    serialize_into(out, bytes_as_bits(f.syndrome));
  }
  return BitString::from_bytes(out);
}

// Bits needed by h1 for a session of n pulses in the worst case.
inline std::size_t h1_capacity_for(std::size_t n, std::size_t syndrome_bytes = kMaxSyndromeBytes) {
  const std::size_t blocks = (n + kBlockBytes * 8 - 1) / (kBlockBytes * 8);
  const std::size_t field = 4 + (n + 7) / 8;  // one length-prefixed n-bit field
  return 8 * (7 * field + 4 + blocks * (syndrome_bytes + kVerifyHashBytes));
}

// ---------------------------------------------------------------------------
// Session configuration and outcome.

struct SessionConfig {
  ProtocolVariant variant = ProtocolVariant::qake;
  SourceConfig src;
  ChannelConfig ch;
  std::size_t n_pulses = 4000;
  ProtocolThresholds th;
  DecoyEpsilons ds;
  ConcentrationMethod method = ConcentrationMethod::kato;
  std::size_t key_bits = 32;
  std::size_t l_theta = 0;
  std::size_t syndrome_bytes = kPart2Bytes;
  double ec_ber_prior = 0.03;

  SecretsConfig secrets_config(std::size_t mask_count = 64) const {
    SecretsConfig c;
    c.tag_av_bits = static_cast<std::size_t>(th.tag_av_bits);
    c.tag_bv_bits = static_cast<std::size_t>(th.tag_bv_bits);
    c.h1_capacity = h1_capacity_for(n_pulses, syndrome_bytes);
    c.h2_capacity = n_pulses + 1;
    c.pa_capacity = n_pulses;
    c.pa_out = key_bits + l_theta;
    c.mask_count = mask_count;
    c.l_theta = variant == ProtocolVariant::prng ? l_theta : 0;
    return c;
  }

  void validate() const {
    src.validate();
    ch.validate();
    th.validate();
    if (n_pulses == 0) throw ConfigError("session needs pulses");
    if (key_bits == 0) throw ConfigError("key length must be positive");
    if (!valid_syndrome_len(syndrome_bytes)) throw ConfigError("unsupported syndrome length");
    if (variant == ProtocolVariant::prng && (l_theta < 128 || 2 * l_theta >= n_pulses))
      throw ConfigError("generator variant needs 128 <= l_theta < n/2");
  }
};

// Small-scale session for simulation and tests. At this size the corner
// analysis used by the optimiser has no feasible point, so each tolerance is
// set from the estimate at the expected counts. Sifted counts may fall to
// half, single-photon bounds to a quarter, and rates may double plus a margin.
inline SessionConfig make_session_config(ProtocolVariant v, std::size_t n, double loss_db, double qber,
                                         std::size_t tag_bits, std::size_t key_bits = 32, double f_p1 = 0.25) {
  SessionConfig c;
  c.variant = v;
  c.n_pulses = n;
  c.ch = ChannelConfig::from_loss_db(loss_db, qber);
  c.key_bits = key_bits;
  c.l_theta = v == ProtocolVariant::prng ? 128 : 0;
  ExperimentModel m;
  m.src = c.src;
  m.ch = c.ch;
  m.n_pulses = static_cast<double>(n);
  m.variant = v == ProtocolVariant::prng ? Variant::prng : Variant::qake;
  m.eps_sec = 1e-2;
  const EpsilonBudget b = detail::budget_for(m, {0.3, 0.3});
  const ObservableModel o = expected_observables(m, f_p1);
  DecoyObservables mean;
  for (int j = 0; j < 3; ++j) {
    mean.test.det[j] = o.q_test[j] * m.n_pulses;
    mean.test.err[j] = o.q_test_err[j] * m.n_pulses;
    mean.key.det[j] = o.q_key[j] * m.n_pulses;
  }
  mean.sift_size = o.q_sift * m.n_pulses;
  if (v == ProtocolVariant::prng) mean.sift_size = mean.test.size() + mean.key.size();
  const PeEstimates e = estimate_all(mean, b.ds, c.src, c.method);
  c.th.f_p1 = f_p1;
  c.th.tag_av_bits = c.th.tag_bv_bits = static_cast<double>(tag_bits);
  c.th.sift_tol = std::floor(0.5 * mean.sift_size);
  c.th.n1_p2_tol = std::floor(0.25 * e.n1_p2);
  c.th.n1_p1_tol = std::floor(0.25 * e.n1_p1);
  c.th.n0_p2_tol = 0;
  c.th.e1_tol = std::min(0.5, 2 * e.e1_ub + 0.15);
  c.th.ebit_tol = std::min(0.5, 2 * e.ebit + 0.05);
  c.th.l_theta = static_cast<double>(c.l_theta);
  c.th.l_kb = static_cast<double>(key_bits);
  c.ds = b.ds;
  c.ec_ber_prior = std::clamp(qber, 0.005, 0.1);
  return c;
}

struct SessionOutcome {
  Outcome f_a = Outcome::zero, f_b = Outcome::zero;
  std::optional<BitString> k_a, k_b;
  std::uint32_t label_a = 0, label_b = 0;
  Decision d_pe = Decision::unset, d_av = Decision::unset, d_bv = Decision::unset;
  bool structural_failure = false;
  std::size_t ec_blocks = 0, ec_blocks_accepted = 0;
  std::optional<DecoyObservables> observed;  // Alice's view, when the sets were consistent
  std::optional<PeEstimates> estimates;
  std::vector<LoggedMessage> transcript;
};

inline std::string dump_transcript(const SessionOutcome& o) {
  std::ostringstream os;
  for (const auto& m : o.transcript) {
    os << to_string(m.sent.kind) << ' ' << (m.dir == Direction::alice_to_bob ? "A>B" : "B>A") << ' ';
    if (m.delivered)
      os << to_hex(m.delivered->payload);
    else
      os << '-';
    os << '\n';
  }
  return os.str();
}

// In-flight message hook. Returning nothing drops the message. A hook only
// ever sees message bytes, never either party's secrets.
class MessageHook {
 public:
  virtual ~MessageHook() = default;
  virtual std::optional<ProtocolMessage> on_message(const ProtocolMessage& msg, Direction dir) = 0;
};

inline std::uint32_t label_agreement(std::uint32_t own, std::uint32_t received) {
  if (own < 1 || received < 1) throw DomainError("labels start at 1");
  return std::max(own, received);
}

inline IndexSet sift(const std::vector<Basis>& sent, const IndexSet& detected, const BitString& announced_bases) {
  if (announced_bases.size() != detected.size()) throw DimensionError("one basis per detected round expected");
  IndexSet out;
  for (std::size_t k = 0; k < detected.size(); ++k) {
    const auto i = detected[k];
    if (i >= sent.size()) throw DimensionError("detected index out of range");
    if ((sent[i] == Basis::X) == announced_bases.get(k)) out.push_back(i);
  }
  return out;
}

inline std::size_t test_set_size(double f, std::size_t sifted) {
  return static_cast<std::size_t>(std::ceil(f * static_cast<double>(sifted)));
}

inline DecoyObservables collect_observables(const RawSessionData& raw, const IndexSet& test, const BitString& x_test,
                                            const IndexSet& key, std::size_t sift_size) {
  DecoyObservables o;
  o.sift_size = static_cast<double>(sift_size);
  for (std::size_t k = 0; k < test.size(); ++k) {
    const auto& p = raw.pulses[test[k]];
    o.test.det[p.intensity] += 1;
    if (x_test.get(k) != (p.bit != 0)) o.test.err[p.intensity] += 1;
  }
  for (auto i : key) o.key.det[raw.pulses[i].intensity] += 1;
  return o;
}

struct PeResult {
  bool pass = false;
  PeEstimates est;
};

inline PeResult parameter_estimation(const DecoyObservables& obs, const ProtocolThresholds& th,
                                     const DecoyEpsilons& eps, const SourceConfig& src, ConcentrationMethod m,
                                     std::size_t test_size_expected) {
  PeResult r;
  if (obs.sift_size <= 0 || obs.test.size() <= 0 || obs.key.size() <= 0) return r;
  r.est = estimate_all(obs, eps, src, m);
  r.pass = obs.sift_size >= th.sift_tol && static_cast<std::size_t>(obs.test.size()) == test_size_expected &&
           r.est.n1_p2 >= th.n1_p2_tol && r.est.n1_p1 >= th.n1_p1_tol && r.est.n0_p2 >= th.n0_p2_tol &&
           r.est.e1_ub <= th.e1_tol && r.est.ebit <= th.ebit_tol;
  return r;
}

namespace detail {

inline BitString gather(const RawSessionData& raw, const IndexSet& idx, bool alice) {
  BitString out(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const bool b = alice ? raw.pulses[idx[k]].bit != 0 : raw.detections[idx[k]].bit == 1;
    if (b) out.set(k, true);
  }
  return out;
}

inline Bytes ec_encode(const BitString& x, std::size_t syndrome_bytes) {
  Bytes s;
  const std::size_t bb = kBlockBytes * 8;
  for (std::size_t pos = 0; pos < x.size(); pos += bb) {
    const auto pkt = sender_encode(Block::from_bits(x.slice(pos, std::min(bb, x.size() - pos))), syndrome_bytes);
    s.insert(s.end(), pkt.masked_syndrome.begin(), pkt.masked_syndrome.end());
    s.insert(s.end(), pkt.verify_hash.begin(), pkt.verify_hash.end());
  }
  return s;
}

inline std::size_t ec_length(std::size_t bits, std::size_t syndrome_bytes) {
  const std::size_t bb = kBlockBytes * 8;
  return (bits + bb - 1) / bb * (syndrome_bytes + kVerifyHashBytes);
}

struct EcDecoded {
  BitString x;
  std::size_t blocks = 0, accepted = 0;
};

inline EcDecoded ec_decode(const BitString& local, const Bytes& s, std::size_t syndrome_bytes, double prior) {
  EcDecoded out;
  out.x = local;
  const std::size_t bb = kBlockBytes * 8;
  const std::size_t per = syndrome_bytes + kVerifyHashBytes;
  std::size_t off = 0;
  for (std::size_t pos = 0; pos < local.size(); pos += bb, off += per) {
    const std::size_t len = std::min(bb, local.size() - pos);
    SyndromePacket pkt;
    pkt.masked_syndrome.assign(s.begin() + static_cast<std::ptrdiff_t>(off),
                               s.begin() + static_cast<std::ptrdiff_t>(off + syndrome_bytes));
    std::copy_n(s.begin() + static_cast<std::ptrdiff_t>(off + syndrome_bytes), kVerifyHashBytes,
                pkt.verify_hash.begin());
    pkt.round_index = static_cast<int>((syndrome_bytes - kPart2Bytes) / kSyndromeStep) + 1;
    const auto res = receiver_decode(Block::from_bits(local.slice(pos, len)), pkt, prior);
    ++out.blocks;
    if (res.accepted) ++out.accepted;
    const BitString cand = res.candidate.bits().slice(0, len);
    for (std::size_t k = 0; k < len; ++k) out.x.set(pos + k, cand.get(k));
  }
  return out;
}

struct Aborted {};

}  // namespace detail

// One authentication round between Alice and Bob. `raw` may supply
// pre-recorded quantum data for the plain variant; otherwise it is simulated
// from the configuration. Every random choice derives from `seed`.
class Session {
 public:
  Session(const SessionConfig& cfg, PartyState& alice, PartyState& bob, std::uint64_t seed, MessageHook* hook,
          const RawSessionData* raw)
      : cfg_(cfg), a_(alice), b_(bob), seed_(seed), hook_(hook), raw_in_(raw) {}

  SessionOutcome run() {
    cfg_.validate();
    if (raw_in_ && cfg_.variant == ProtocolVariant::prng)
      throw ConfigError("the generator variant derives its bases from the seeds and cannot use recorded data");
    if (raw_in_) raw_in_->validate();
    rng_a_.seed(derive_seed(seed_, 11));
    rng_b_.seed(derive_seed(seed_, 12));
    ++a_.rounds;
    ++b_.rounds;
    beta_a_ = a_.label;
    beta_b_ = b_.label;
    try {
      steps();
    } catch (const detail::Aborted&) {
      out_.structural_failure = true;
    }
    finish();
    return std::move(out_);
  }

 private:
  // Sends a message through the hook. Returns the delivered payload or aborts
  // the session when it was dropped or arrived as the wrong kind.
  Bytes deliver(MessageKind kind, Bytes payload, Direction dir) {
    ProtocolMessage msg{kind, std::move(payload)};
    std::optional<ProtocolMessage> got = hook_ ? hook_->on_message(msg, dir) : std::optional<ProtocolMessage>(msg);
    out_.transcript.push_back({dir, msg, got});
    if (!got || got->kind != kind) throw detail::Aborted{};
    return std::move(got->payload);
  }

  template <class F>
  static auto parse(F f) {
    try {
      return f();
    } catch (const FormatError&) {
      throw detail::Aborted{};
    }
  }

  void steps() {
    const std::size_t n = cfg_.n_pulses;
    const bool prng = cfg_.variant == ProtocolVariant::prng;

    // Label agreement.
    {
      Bytes p;
      put_u32(p, a_.label);
      const Bytes got = deliver(MessageKind::LabelAnnounce, std::move(p), Direction::alice_to_bob);
      const std::uint32_t alpha_r = parse([&] {
        std::size_t off = 0;
        auto v = get_u32(got, off);
        expect_consumed(got, off);
        if (v == 0) throw FormatError("zero label");
        return v;
      });
      beta_b_ = label_agreement(b_.label, alpha_r);
    }
    {
      Bytes p;
      put_u32(p, b_.label);
      const Bytes got = deliver(MessageKind::LabelAnnounce, std::move(p), Direction::bob_to_alice);
      const std::uint32_t alpha_r = parse([&] {
        std::size_t off = 0;
        auto v = get_u32(got, off);
        expect_consumed(got, off);
        if (v == 0) throw FormatError("zero label");
        return v;
      });
      beta_a_ = label_agreement(a_.label, alpha_r);
    }

    // Quantum exchange.
    RawSessionData raw;
    if (raw_in_) {
      if (raw_in_->n() != n) throw ConfigError("recorded data length differs from n_pulses");
      raw = *raw_in_;
    } else {
      BitString ab, bb;
      BasisOverride ov;
      if (prng) {
        if (beta_a_ > a_.secrets.basis_seeds.size() || beta_b_ > b_.secrets.basis_seeds.size())
          throw detail::Aborted{};
        ab = prng_expand_basis(a_.secrets.basis_seeds[beta_a_ - 1], n);
        bb = prng_expand_basis(b_.secrets.basis_seeds[beta_b_ - 1], n);
        ov = {&ab, &bb};
      }
      raw = simulate_session(cfg_.src, cfg_.ch, n, derive_seed(seed_, 1), ov);
    }
    const Bytes qb = deliver(MessageKind::QuantumBlock, serialize(BitString(n, true)), Direction::alice_to_bob);
    const BitString arrived = parse([&] {
      std::size_t off = 0;
      auto v = deserialize_bits(qb, off);
      expect_consumed(qb, off);
      if (v.size() != n) throw FormatError("pulse map has the wrong length");
      return v;
    });
    // Bob's view: detections on rounds that reached him.
    IndexSet detected;
    for (std::size_t i = 0; i < n; ++i)
      if (arrived.get(i) && raw.detections[i].detected) detected.push_back(static_cast<std::uint32_t>(i));

    TranscriptFields fa, fb;  // Alice's and Bob's views
    IndexSet sifted_b;
    if (!prng) {
      BitString bases(detected.size());
      for (std::size_t k = 0; k < detected.size(); ++k)
        if (raw.detections[detected[k]].basis == Basis::X) bases.set(k, true);
      fb.detected = detected;
      fb.bases_p = bases;
      Bytes p;
      put_index_set(p, detected);
      serialize_into(p, bases);
      const Bytes got = deliver(MessageKind::DetectAndBasis, std::move(p), Direction::bob_to_alice);
      parse([&] {
        std::size_t off = 0;
        fa.detected = get_index_set(got, off, n);
        fa.bases_p = deserialize_bits(got, off);
        expect_consumed(got, off);
        if (fa.bases_p.size() != fa.detected.size()) throw FormatError("basis count differs from detections");
        return 0;
      });
      std::vector<Basis> sent(n);
      for (std::size_t i = 0; i < n; ++i) sent[i] = raw.pulses[i].basis;
      fa.sifted = sift(sent, fa.detected, fa.bases_p);
      Bytes sp;
      put_index_set(sp, fa.sifted);
      const Bytes got2 = deliver(MessageKind::SiftAnnounce, std::move(sp), Direction::alice_to_bob);
      parse([&] {
        std::size_t off = 0;
        fb.sifted = get_index_set(got2, off, n);
        expect_consumed(got2, off);
        if (!std::includes(detected.begin(), detected.end(), fb.sifted.begin(), fb.sifted.end()))
          throw FormatError("sifted rounds outside the detected set");
        return 0;
      });
      sifted_b = fb.sifted;
    } else {
      sifted_b = detected;
    }

    // Test split by Bob.
    {
      IndexSet pool = sifted_b;
      const std::size_t t = test_set_size(cfg_.th.f_p1, pool.size());
      for (std::size_t k = 0; k < t; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, pool.size() - 1);
        std::swap(pool[k], pool[pick(rng_b_)]);
      }
      fb.test.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(t));
      fb.key.assign(pool.begin() + static_cast<std::ptrdiff_t>(t), pool.end());
      std::sort(fb.test.begin(), fb.test.end());
      std::sort(fb.key.begin(), fb.key.end());
      fb.x_p1 = detail::gather(raw, fb.test, false);
      Bytes p;
      put_index_set(p, fb.test);
      put_index_set(p, fb.key);
      serialize_into(p, fb.x_p1);
      if (prng) serialize_into(p, b_.secrets.basis_seeds[beta_b_ - 1]);
      const Bytes got = deliver(MessageKind::TestAnnounce, std::move(p), Direction::bob_to_alice);
      parse([&] {
        std::size_t off = 0;
        fa.test = get_index_set(got, off, n);
        fa.key = get_index_set(got, off, n);
        fa.x_p1 = deserialize_bits(got, off);
        if (prng) seed_r_ = deserialize_bits(got, off);
        expect_consumed(got, off);
        if (fa.x_p1.size() != fa.test.size()) throw FormatError("test bits differ from test set");
        return 0;
      });
    }

    // Alice: parameter estimation.
    const std::size_t need = cfg_.key_bits + (prng ? cfg_.l_theta : 0);
    {
      IndexSet cover;
      std::merge(fa.test.begin(), fa.test.end(), fa.key.begin(), fa.key.end(), std::back_inserter(cover));
      const bool structure_ok = std::adjacent_find(cover.begin(), cover.end()) == cover.end() &&
                                (prng || cover == fa.sifted);
      const std::size_t sift_size = prng ? cover.size() : fa.sifted.size();
      bool pass = structure_ok && fa.key.size() >= need;
      if (pass) {
        const auto obs = collect_observables(raw, fa.test, fa.x_p1, fa.key, sift_size);
        const auto pe = parameter_estimation(obs, cfg_.th, cfg_.ds, cfg_.src, cfg_.method,
                                             test_set_size(cfg_.th.f_p1, sift_size));
        pass = pe.pass;
        out_.observed = obs;
        out_.estimates = pe.est;
      }
      if (pass && prng) pass = seed_r_ == a_.secrets.basis_seeds[beta_a_ - 1];
      d_pe_ = pass;
      out_.d_pe = pass ? Decision::one : Decision::zero;
    }
    fa.x_p2 = detail::gather(raw, fa.key, true);

    // Error correction, one-way.
    {
      Bytes s;
      if (d_pe_) {
        s = detail::ec_encode(fa.x_p2, cfg_.syndrome_bytes);
      } else {
        s.resize(detail::ec_length(fa.key.size(), cfg_.syndrome_bytes));
        for (auto& c : s) c = static_cast<std::uint8_t>(rng_a_());
      }
      fa.syndrome = s;
      Bytes p;
      serialize_into(p, BitString::from_bytes(s));
      const Bytes got = deliver(MessageKind::Syndrome, std::move(p), Direction::alice_to_bob);
      parse([&] {
        std::size_t off = 0;
        const BitString bits = deserialize_bits(got, off);
        expect_consumed(got, off);
        if (bits.size() % 8 != 0) throw FormatError("syndrome is not whole bytes");
        fb.syndrome = bits.to_bytes();
        if (fb.syndrome.size() != detail::ec_length(fb.key.size(), cfg_.syndrome_bytes))
          throw FormatError("syndrome length does not match the key set");
        return 0;
      });
      const BitString local = detail::gather(raw, fb.key, false);
      auto dec = detail::ec_decode(local, fb.syndrome, cfg_.syndrome_bytes, cfg_.ec_ber_prior);
      out_.ec_blocks = dec.blocks;
      out_.ec_blocks_accepted = dec.accepted;
      fb.x_p2 = std::move(dec.x);
    }

    // Alice validation tag.
    {
      const std::size_t t_av = a_.secrets.k1_hash.out_len;
      BitString tag;
      bool fits = true;
      BitString msg = validation_message(cfg_.variant, fa, n);
      if (msg.size() > a_.secrets.k1_hash.msg_len || beta_a_ > a_.secrets.mask_keys.size()) fits = false;
      if (d_pe_ && fits) {
        a_.mask_ledger.record(a_.rounds, beta_a_, a_.label);
        tag = masked_tag(a_.secrets.k1_hash, a_.secrets.mask_keys[beta_a_ - 1],
                         pad_to(msg, a_.secrets.k1_hash.msg_len))
                  .value;
      } else {
        d_pe_ = false;
        out_.d_pe = Decision::zero;
        tag = BitString::random(t_av, rng_a_);
      }
      const Bytes got = deliver(MessageKind::TagAV, serialize(tag), Direction::alice_to_bob);
      BitString tag_r = parse([&] {
        std::size_t off = 0;
        auto v = deserialize_bits(got, off);
        expect_consumed(got, off);
        if (v.size() != b_.secrets.k1_hash.out_len) throw FormatError("tag length");
        return v;
      });
      const BitString msg_b = validation_message(cfg_.variant, fb, n);
      bool ok = false;
      if (msg_b.size() <= b_.secrets.k1_hash.msg_len && fb.key.size() >= need &&
          beta_b_ <= b_.secrets.mask_keys.size()) {
        b_.mask_ledger.record(b_.rounds, beta_b_, b_.label);
        const Tag expect = masked_tag(b_.secrets.k1_hash, b_.secrets.mask_keys[beta_b_ - 1],
                                      pad_to(msg_b, b_.secrets.k1_hash.msg_len));
        ok = verify_tag(expect, Tag{tag_r});
      }
      out_.d_av = ok ? Decision::one : Decision::zero;
      f_b_ = ok ? Outcome::one : Outcome::zero;
      b_decided_ = true;
    }

    // Bob validation tag.
    {
      BitString tag;
      if (f_b_ == Outcome::one && fb.x_p2.size() + 1 <= b_.secrets.k2.msg_len)
        tag = affine_tag(b_.secrets.k2, fb.x_p2).value;
      else
        tag = BitString::random(b_.secrets.k2.out_len, rng_b_);
      const Bytes got = deliver(MessageKind::TagBV, serialize(tag), Direction::bob_to_alice);
      BitString tag_r = parse([&] {
        std::size_t off = 0;
        auto v = deserialize_bits(got, off);
        expect_consumed(got, off);
        if (v.size() != a_.secrets.k2.out_len) throw FormatError("tag length");
        return v;
      });
      bool ok = false;
      if (fa.x_p2.size() + 1 <= a_.secrets.k2.msg_len) ok = verify_tag(affine_tag(a_.secrets.k2, fa.x_p2), Tag{tag_r});
      out_.d_bv = ok ? Decision::one : Decision::zero;
      f_a_ = (d_pe_ && ok) ? Outcome::one : Outcome::zero;
      a_decided_ = true;
    }
    x_a_ = fa.x_p2;
    x_b_ = fb.x_p2;
  }

  // Privacy amplification, label update and seed refresh.
  void finish() {
    if (!a_decided_) f_a_ = Outcome::zero;
    if (!b_decided_) f_b_ = Outcome::zero;
    const bool prng = cfg_.variant == ProtocolVariant::prng;
    auto amplify = [&](PartyState& p, const BitString& x, std::uint32_t beta) -> std::optional<BitString> {
      const auto& seed = p.secrets.pa_seed;
      if (x.size() > seed.msg_len || seed.out_len != cfg_.key_bits + (prng ? cfg_.l_theta : 0)) return std::nullopt;
      const BitString out = privacy_amplify(seed, pad_to(x, seed.msg_len), seed.out_len);
      if (prng) p.secrets.basis_seeds[beta - 1] = out.slice(cfg_.key_bits, cfg_.l_theta);
      return out.slice(0, cfg_.key_bits);
    };
    if (f_a_ == Outcome::one) {
      out_.k_a = amplify(a_, x_a_, beta_a_);
      if (!out_.k_a) f_a_ = Outcome::zero;
    }
    if (f_b_ == Outcome::one) {
      out_.k_b = amplify(b_, x_b_, beta_b_);
      if (!out_.k_b) f_b_ = Outcome::zero;
    }
    // Saturates: a label pushed to the top by a forged announcement leaves the
    // party without usable mask keys rather than wrapping back to fresh ones.
    auto next = [](std::uint32_t beta) { return beta == 0xffffffffu ? beta : beta + 1; };
    a_.label = f_a_ == Outcome::one ? beta_a_ : next(beta_a_);
    b_.label = f_b_ == Outcome::one ? beta_b_ : next(beta_b_);
    out_.f_a = a_.impostor ? Outcome::phi : f_a_;
    out_.f_b = b_.impostor ? Outcome::phi : f_b_;
    if (a_.impostor) out_.k_a.reset();
    if (b_.impostor) out_.k_b.reset();
    out_.label_a = a_.label;
    out_.label_b = b_.label;
  }

  const SessionConfig& cfg_;
  PartyState& a_;
  PartyState& b_;
  std::uint64_t seed_;
  MessageHook* hook_;
  const RawSessionData* raw_in_;
  Rng rng_a_, rng_b_;
  std::uint32_t beta_a_ = 1, beta_b_ = 1;
  bool d_pe_ = false;
  bool a_decided_ = false, b_decided_ = false;
  Outcome f_a_ = Outcome::zero, f_b_ = Outcome::zero;
  BitString x_a_, x_b_, seed_r_;
  SessionOutcome out_;
};

inline SessionOutcome run_session(const SessionConfig& cfg, PartyState& alice, PartyState& bob, std::uint64_t seed,
                                  MessageHook* hook = nullptr, const RawSessionData* raw = nullptr) {
  if (alice.role != Role::alice || bob.role != Role::bob) throw ConfigError("party roles swapped");
  return Session(cfg, alice, bob, seed, hook, raw).run();
}

}  // namespace qake
