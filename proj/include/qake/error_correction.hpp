#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qake/bits.hpp"
#include "qake/crypto.hpp"
#include "qake/errors.hpp"

namespace qake {

inline constexpr std::size_t kBlockBytes = 1188;
inline constexpr std::size_t kPart1Bytes = 968;
inline constexpr std::size_t kPart2Bytes = 220;
inline constexpr std::size_t kVerifyHashBytes = 16;
inline constexpr std::size_t kSyndromeStep = 44;
inline constexpr int kMaxEcRounds = 6;
inline constexpr std::size_t kMaxSyndromeBytes = kPart2Bytes + kSyndromeStep * (kMaxEcRounds - 1);

struct Block {
  Bytes data = Bytes(kBlockBytes, 0);

  Block() = default;
  explicit Block(Bytes d) : data(std::move(d)) {
    if (data.size() != kBlockBytes) throw DimensionError("block must hold exactly 1188 bytes");
  }
  // Zero-pads a bit string of at most 9504 bits.
  static Block from_bits(const BitString& bits) {
    if (bits.size() > kBlockBytes * 8) throw DimensionError("bit string exceeds block size");
    Bytes d = bits.to_bytes();
    d.resize(kBlockBytes, 0);
    return Block(std::move(d));
  }
  BitString bits() const { return BitString::from_bytes(data); }

  std::span<const std::uint8_t> part1() const { return {data.data(), kPart1Bytes}; }
  std::span<const std::uint8_t> part2() const { return {data.data() + kPart1Bytes, kPart2Bytes}; }
  bool operator==(const Block&) const = default;
};

using VerifyHash = std::array<std::uint8_t, kVerifyHashBytes>;

struct SyndromePacket {
  Bytes masked_syndrome;
  VerifyHash verify_hash{};
  int round_index = 1;

  void validate() const {
    if (round_index < 1 || round_index > kMaxEcRounds) throw DomainError("syndrome round out of range");
    if (masked_syndrome.size() != kPart2Bytes + kSyndromeStep * (round_index - 1))
      throw DomainError("syndrome length does not match its round");
  }
};

struct EcOutcome {
  std::optional<Block> corrected;
  std::size_t leakage_bits = 0;
  int rounds_used = 0;
  bool fell_back_to_reveal = false;
};

inline VerifyHash make_verify_hash(const Block& block) {
  const Digest256 d = sha256(block.data);
  VerifyHash h{};
  std::copy_n(d.begin(), h.size(), h.begin());
  return h;
}

inline bool valid_syndrome_len(std::size_t len) {
  return len >= kPart2Bytes && len <= kMaxSyndromeBytes && (len - kPart2Bytes) % kSyndromeStep == 0;
}

// A linear syndrome map on part1. The first 220 bytes of a syndrome are the
// part masked with part2; any further bytes are sent in the clear.
class SyndromeCode {
 public:
  virtual ~SyndromeCode() = default;
  virtual Bytes syndrome(std::span<const std::uint8_t> part1, std::size_t len) const = 0;
  // Candidate sender block from the local block and a masked syndrome, or
  // nothing if decoding did not converge.
  virtual std::optional<Block> decode(const Block& local, std::span<const std::uint8_t> masked,
                                      double ber_prior) const = 0;
};

// Syndrome = the first `len` bytes of part1. Only useful for deterministic tests.
class RepetitionCode final : public SyndromeCode {
 public:
  Bytes syndrome(std::span<const std::uint8_t> part1, std::size_t len) const override {
    if (!valid_syndrome_len(len)) throw DomainError("unsupported syndrome length");
    return Bytes(part1.begin(), part1.begin() + static_cast<std::ptrdiff_t>(len));
  }

  std::optional<Block> decode(const Block& local, std::span<const std::uint8_t> masked, double) const override {
    Block out = local;
    // Unmasked bytes are exact copies of part1.
    for (std::size_t i = kPart2Bytes; i < masked.size(); ++i) out.data[i] = masked[i];
    const Bytes s = syndrome(out.part1(), masked.size());
    for (std::size_t i = 0; i < kPart2Bytes; ++i) out.data[kPart1Bytes + i] = s[i] ^ masked[i];
    return out;
  }
};

struct LdpcConfig {
  float normalization = 0.8f;
  int max_iterations = 60;
  int stall_iterations = 12;
  std::uint64_t construction_seed = 0x5eed1188;
};

// Quasi-cyclic LDPC with lifting size 352. Part1 spans 22 circulant columns.
// The 5 masked base rows pair weight-3 info columns with a bit-level
// accumulator (parity check i touches syndrome bits i and i-1), so the
// syndrome S solves T S = H1 X1 and is computed by a running XOR. Each extra
// 44-byte step adds one unmasked base row that checks every info column once.
class QcLdpcCode final : public SyndromeCode {
 public:
  static constexpr std::size_t Z = 352;
  static constexpr std::size_t kInfoCols = kPart1Bytes * 8 / Z;  // 22
  static constexpr std::size_t kMaskedRows = kPart2Bytes * 8 / Z;  // 5
  static constexpr std::size_t kExtraRows = kMaxEcRounds - 1;
  static constexpr std::size_t kInfoBits = kPart1Bytes * 8;
  static constexpr std::size_t kMaskBits = kPart2Bytes * 8;

  explicit QcLdpcCode(LdpcConfig cfg = {}) : cfg_(cfg) { build(); }

  const LdpcConfig& config() const { return cfg_; }

  // For each bit-level check row (masked rows first), the info bits it touches.
  const std::vector<std::vector<std::uint32_t>>& info_neighbors() const { return rows_; }

  Bytes syndrome(std::span<const std::uint8_t> part1, std::size_t len) const override {
    if (!valid_syndrome_len(len)) throw DomainError("unsupported syndrome length");
    if (part1.size() != kPart1Bytes) throw DimensionError("part1 must hold 968 bytes");
    const BitString x = BitString::from_bytes(part1);
    const std::size_t nrows = len * 8;
    BitString s(nrows);
    bool run = false;
    for (std::size_t r = 0; r < nrows; ++r) {
      bool p = false;
      for (auto v : rows_[r]) p ^= x.get(v);
      if (r < kMaskBits) {
        run ^= p;
        s.set(r, run);
      } else {
        s.set(r, p);
      }
    }
    return s.to_bytes();
  }

  std::optional<Block> decode(const Block& local, std::span<const std::uint8_t> masked,
                              double ber_prior) const override {
    if (!valid_syndrome_len(masked.size())) throw DomainError("unsupported syndrome length");
    const std::size_t nrows = masked.size() * 8;
    const BitString x1 = BitString::from_bytes(local.part1());
    const BitString x2 = BitString::from_bytes(local.part2());
    const BitString m = BitString::from_bytes(masked);

    // Targets for the error pattern (e1, e2): with S'' = M ^ X2' = S ^ e2,
    // masked rows satisfy H1 e1 + T e2 = H1 X1' + T S''; extra rows satisfy
    // H e1 = H X1' + s.
    std::vector<std::uint8_t> target(nrows);
    bool prev = false;
    for (std::size_t r = 0; r < nrows; ++r) {
      bool p = false;
      for (auto v : rows_[r]) p ^= x1.get(v);
      if (r < kMaskBits) {
        const bool s2 = m.get(r) ^ x2.get(r);
        p ^= s2 ^ prev;
        prev = s2;
      } else {
        p ^= m.get(r);
      }
      target[r] = p;
    }

    const std::size_t nvars = kInfoBits + kMaskBits;
    const double p = std::clamp(ber_prior, 1e-4, 0.45);
    const float prior = static_cast<float>(std::log((1.0 - p) / p));
    std::vector<float> total(nvars, prior);
    const std::size_t nedges = row_start_[nrows];
    std::vector<float> msg(nedges, 0.0f);
    std::vector<std::uint8_t> hard(nvars, 0);

    auto unsatisfied = [&] {
      std::size_t bad = 0;
      for (std::size_t r = 0; r < nrows; ++r) {
        std::uint8_t par = target[r];
        for (std::size_t e = row_start_[r]; e < row_start_[r + 1]; ++e) par ^= hard[edge_var_[e]];
        bad += par;
      }
      return bad;
    };

    std::size_t best = unsatisfied();
    int since_best = 0;
    for (int it = 0; it < cfg_.max_iterations && best > 0; ++it) {
      // Layered schedule: variable totals are refreshed after every check.
      for (std::size_t r = 0; r < nrows; ++r) {
        const std::size_t b = row_start_[r], e_end = row_start_[r + 1];
        float min1 = 1e30f, min2 = 1e30f;
        std::size_t argmin = b;
        bool neg = target[r] != 0;
        for (std::size_t e = b; e < e_end; ++e) {
          const float q = total[edge_var_[e]] - msg[e];
          const float a = std::fabs(q);
          if (q < 0) neg = !neg;
          if (a < min1) {
            min2 = min1;
            min1 = a;
            argmin = e;
          } else if (a < min2) {
            min2 = a;
          }
        }
        for (std::size_t e = b; e < e_end; ++e) {
          const std::uint32_t v = edge_var_[e];
          const float q = total[v] - msg[e];
          const bool sgn = neg ^ (q < 0);
          const float mag = cfg_.normalization * (e == argmin ? min2 : min1);
          const float out = sgn ? -mag : mag;
          total[v] = q + out;
          msg[e] = out;
        }
      }
      for (std::size_t v = 0; v < nvars; ++v) hard[v] = total[v] < 0;
      const std::size_t bad = unsatisfied();
      if (bad < best) {
        best = bad;
        since_best = 0;
      } else if (++since_best >= cfg_.stall_iterations) {
        break;
      }
    }
    if (best > 0) return std::nullopt;

    BitString e1(kInfoBits), e2(kMaskBits);
    for (std::size_t v = 0; v < kInfoBits; ++v)
      if (hard[v]) e1.set(v, true);
    for (std::size_t v = 0; v < kMaskBits; ++v)
      if (hard[kInfoBits + v]) e2.set(v, true);
    BitString out = x1 ^ e1;
    out.append(x2 ^ e2);
    return Block::from_bits(out);
  }

 private:
  void build() {
    Rng rng(cfg_.construction_seed);
    const std::size_t base_rows = kMaskedRows + kExtraRows;
    // shift[r][c] < 0 means no circulant at (r, c).
    std::vector<std::vector<int>> shift(base_rows, std::vector<int>(kInfoCols, -1));
    std::vector<std::array<int, 3>> triples;
    for (int a = 0; a < 5; ++a)
      for (int b = a + 1; b < 5; ++b)
        for (int c = b + 1; c < 5; ++c) triples.push_back({a, b, c});
    for (std::size_t c = 0; c < kInfoCols; ++c)
      for (int r : triples[c % triples.size()]) shift[r][c] = 0;
    for (std::size_t r = kMaskedRows; r < base_rows; ++r)
      for (std::size_t c = 0; c < kInfoCols; ++c) shift[r][c] = 0;

    // Draw circulant shifts one entry at a time, rejecting those that close a
    // length-4 cycle with entries already placed.
    std::uniform_int_distribution<int> pick(0, static_cast<int>(Z) - 1);
    auto closes_4cycle = [&](std::size_t r, std::size_t c, int s) {
      for (std::size_t r2 = 0; r2 < base_rows; ++r2) {
        if (r2 == r || shift[r2][c] < 0) continue;
        for (std::size_t c2 = 0; c2 < c; ++c2) {
          if (shift[r][c2] < 0 || shift[r2][c2] < 0) continue;
          const long d = (long(s) - shift[r][c2]) - (long(shift[r2][c]) - shift[r2][c2]);
          if (((d % long(Z)) + long(Z)) % long(Z) == 0) return true;
        }
      }
      return false;
    };
    for (std::size_t c = 0; c < kInfoCols; ++c)
      for (std::size_t r = 0; r < base_rows; ++r) {
        if (shift[r][c] < 0) continue;
        int s = pick(rng);
        for (int tries = 0; tries < 2000 && closes_4cycle(r, c, s); ++tries) s = pick(rng);
        shift[r][c] = s;
      }

    rows_.assign(base_rows * Z, {});
    for (std::size_t r = 0; r < base_rows; ++r)
      for (std::size_t k = 0; k < Z; ++k)
        for (std::size_t c = 0; c < kInfoCols; ++c)
          if (shift[r][c] >= 0)
            rows_[r * Z + k].push_back(static_cast<std::uint32_t>(c * Z + (k + shift[r][c]) % Z));

    row_start_.assign(rows_.size() + 1, 0);
    edge_var_.clear();
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      for (auto v : rows_[r]) edge_var_.push_back(v);
      if (r < kMaskBits) {
        edge_var_.push_back(static_cast<std::uint32_t>(kInfoBits + r));
        if (r > 0) edge_var_.push_back(static_cast<std::uint32_t>(kInfoBits + r - 1));
      }
      row_start_[r + 1] = edge_var_.size();
    }
  }

  LdpcConfig cfg_;
  std::vector<std::vector<std::uint32_t>> rows_;
  std::vector<std::size_t> row_start_;
  std::vector<std::uint32_t> edge_var_;
};

inline const QcLdpcCode& default_ldpc_code() {
  static const QcLdpcCode code;
  return code;
}

inline SyndromePacket sender_encode(const Block& block, std::size_t syndrome_len,
                                    const SyndromeCode& code = default_ldpc_code()) {
  if (!valid_syndrome_len(syndrome_len)) throw DomainError("unsupported syndrome length");
  SyndromePacket pkt;
  pkt.masked_syndrome = code.syndrome(block.part1(), syndrome_len);
  const auto p2 = block.part2();
  for (std::size_t i = 0; i < kPart2Bytes; ++i) pkt.masked_syndrome[i] ^= p2[i];
  pkt.verify_hash = make_verify_hash(block);
  pkt.round_index = static_cast<int>((syndrome_len - kPart2Bytes) / kSyndromeStep) + 1;
  return pkt;
}

struct DecodeResult {
  Block candidate;
  bool accepted = false;
};

inline DecodeResult receiver_decode(const Block& local, const SyndromePacket& packet, double ber_prior = 0.02,
                                    const SyndromeCode& code = default_ldpc_code()) {
  packet.validate();
  auto cand = code.decode(local, packet.masked_syndrome, ber_prior);
  if (!cand) return {local, false};
  const bool ok = make_verify_hash(*cand) == packet.verify_hash;
  return {std::move(*cand), ok};
}

struct EcSessionConfig {
  double ber_prior = 0.02;
  bool count_hash_leakage = true;
};

inline EcOutcome ec_session(const Block& sender, const Block& receiver, const EcSessionConfig& cfg = {},
                            const SyndromeCode& code = default_ldpc_code()) {
  EcOutcome out;
  const std::size_t hash_bits = cfg.count_hash_leakage ? 8 * kVerifyHashBytes : 0;
  for (int round = 1; round <= kMaxEcRounds; ++round) {
    const std::size_t len = kPart2Bytes + kSyndromeStep * (round - 1);
    const auto pkt = sender_encode(sender, len, code);
    auto res = receiver_decode(receiver, pkt, cfg.ber_prior, code);
    out.rounds_used = round;
    // Each larger syndrome extends the previous one, so only the final length is new information.
    out.leakage_bits = 8 * len + hash_bits;
    if (res.accepted) {
      out.corrected = std::move(res.candidate);
      return out;
    }
  }
  out.fell_back_to_reveal = true;
  out.corrected = sender;
  out.leakage_bits = 8 * kBlockBytes;
  return out;
}

// One benchmark trial: a uniformly random block and a copy with i.i.d. flips
// at rate `ber`, both drawn from (seed, trial).
struct EcBenchRow {
  std::uint64_t trial = 0;
  int rounds_used = 0;
  std::size_t leakage_bits = 0;
  bool accepted = false;
  bool fell_back = false;
  bool wrong = false;  // accepted with a block that differs from the sender's
};

inline EcBenchRow ec_bench_trial(std::uint64_t trial, double ber, std::uint64_t seed,
                                 const SyndromeCode& code = default_ldpc_code()) {
  if (!(ber >= 0 && ber <= 0.5)) throw ConfigError("bit error rate must lie in [0,0.5]");
  Rng rng(derive_seed(seed, trial));
  const BitString a = BitString::random(kBlockBytes * 8, rng);
  BitString b = a;
  std::bernoulli_distribution flip(ber);
  for (std::size_t i = 0; i < b.size(); ++i)
    if (flip(rng)) b.flip(i);
  const Block sender = Block::from_bits(a);
  const auto o = ec_session(sender, Block::from_bits(b), {std::clamp(ber, 1e-4, 0.2), true}, code);
  EcBenchRow r;
  r.trial = trial;
  r.rounds_used = o.rounds_used;
  r.leakage_bits = o.leakage_bits;
  r.fell_back = o.fell_back_to_reveal;
  r.accepted = !o.fell_back_to_reveal;
  r.wrong = r.accepted && !(o.corrected && o.corrected->data == sender.data);
  return r;
}

}  // namespace qake
