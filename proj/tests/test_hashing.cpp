#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "qake/hashing.hpp"

using namespace qake;

namespace {

// Dense matrix-vector product over GF(2) straight from the indexing rule.
BitString dense_hash(const ToeplitzSeed& s, const BitString& m) {
  BitString out(s.out_len);
  for (std::size_t i = 0; i < s.out_len; ++i) {
    bool acc = false;
    for (std::size_t j = 0; j < s.msg_len; ++j) acc ^= s.bits[i + s.msg_len - 1 - j] && m[j];
    out.set(i, acc);
  }
  return out;
}

BitString from_index(std::uint64_t v, std::size_t n) {
  BitString b(n);
  for (std::size_t i = 0; i < n; ++i) b.set(i, (v >> i) & 1u);
  return b;
}

}  // namespace

TEST(Toeplitz, TwoByTwoExample) {
  const ToeplitzSeed s(BitString::from_bits({1, 0, 1}), 2, 2);
  EXPECT_EQ(toeplitz_hash(s, BitString::from_bits({1, 1})), BitString::from_bits({1, 1}));
}

TEST(Toeplitz, ZeroMessageGivesZeroOutput) {
  Rng rng(1);
  const auto s = ToeplitzSeed::random(17, 301, rng);
  EXPECT_EQ(toeplitz_hash(s, BitString(301)), BitString(17));
}

TEST(Toeplitz, DimensionChecks) {
  EXPECT_THROW(ToeplitzSeed(BitString(3), 2, 3), DimensionError);
  EXPECT_THROW(ToeplitzSeed(BitString(1), 0, 2), DimensionError);
  Rng rng(1);
  const auto s = ToeplitzSeed::random(4, 8, rng);
  EXPECT_THROW(toeplitz_hash(s, BitString(9)), DimensionError);
}

TEST(Toeplitz, MatchesDenseOracleOnRandomInstances) {
  Rng rng(2024);
  std::uniform_int_distribution<std::size_t> len(1, 300);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t out = len(rng) % 80 + 1, msg = len(rng);
    const auto s = ToeplitzSeed::random(out, msg, rng);
    BitString m = BitString::random(msg, rng);
    // Sparse and zero-padded messages exercise the zero-word skipping.
    if (t % 3 == 0)
      for (std::size_t i = msg / 2; i < msg; ++i) m.set(i, false);
    ASSERT_EQ(toeplitz_hash(s, m), dense_hash(s, m)) << "instance " << t;
  }
}

TEST(Toeplitz, SixteenBitInputFourBitOutputOracle) {
  Rng rng(16);
  const auto s = ToeplitzSeed::random(4, 16, rng);
  for (std::uint64_t v = 0; v < (1u << 16); v += 97) {
    const BitString m = from_index(v, 16);
    EXPECT_EQ(privacy_amplify(s, m, 4), dense_hash(s, m));
  }
}

// Exhaustive XOR-universality: for every m1 != m2 and c, the fraction of seeds
// with h(m1) ^ h(m2) = c is exactly 2^-out.
TEST(Toeplitz, ExhaustiveXorUniversality) {
  for (std::size_t out : {1u, 2u, 3u})
    for (std::size_t msg : {1u, 2u, 3u, 4u}) {
      const std::size_t seed_len = out + msg - 1;
      const std::uint64_t seeds = 1ull << seed_len;
      for (std::uint64_t d = 1; d < (1ull << msg); ++d) {
        // By linearity h(m1) ^ h(m2) = h(m1 ^ m2), so counting over the difference covers all pairs.
        std::vector<std::uint64_t> hits(1ull << out, 0);
        for (std::uint64_t sv = 0; sv < seeds; ++sv) {
          const ToeplitzSeed s(from_index(sv, seed_len), out, msg);
          const BitString h = toeplitz_hash(s, from_index(d, msg));
          std::uint64_t c = 0;
          for (std::size_t i = 0; i < out; ++i) c |= std::uint64_t{h[i]} << i;
          ++hits[c];
        }
        for (auto h : hits) ASSERT_EQ(h * (1ull << out), seeds) << out << "x" << msg << " diff " << d;
      }
    }
}

TEST(Toeplitz, MonteCarloXorUniversalityAtEightBits) {
  Rng rng(88);
  int hits = 0;
  const int trials = 1000;
  for (int t = 0; t < trials; ++t) {
    const auto s = ToeplitzSeed::random(8, 8, rng);
    const BitString m1 = BitString::random(8, rng);
    BitString m2 = BitString::random(8, rng);
    if (m1 == m2) m2.flip(0);
    const BitString c = BitString::random(8, rng);
    if ((toeplitz_hash(s, m1) ^ toeplitz_hash(s, m2)) == c) ++hits;
  }
  // Binomial(1000, 2^-8) exceeds 13 with probability below 1e-5.
  EXPECT_LE(hits, 13);
}

TEST(MaskedTag, ZeroMaskAndInvolution) {
  Rng rng(4);
  const auto s = ToeplitzSeed::random(24, 100, rng);
  const BitString m = BitString::random(100, rng);
  EXPECT_EQ(masked_tag(s, MaskKey{BitString(24)}, m).value, toeplitz_hash(s, m));
  const MaskKey k{BitString::random(24, rng)};
  EXPECT_EQ(masked_tag(s, k, m).value ^ k.value, toeplitz_hash(s, m));
  EXPECT_THROW(masked_tag(s, MaskKey{BitString(23)}, m), DimensionError);
}

TEST(MaskedTag, TwoByTwoExampleWithMask) {
  const ToeplitzSeed s(BitString::from_bits({1, 0, 1}), 2, 2);
  EXPECT_EQ(masked_tag(s, MaskKey{BitString::from_bits({1, 0})}, BitString::from_bits({1, 1})).value,
            BitString::from_bits({0, 1}));
}

TEST(VerifyTag, EqualityAndSingleFlip) {
  Rng rng(6);
  const Tag t{BitString::random(80, rng)};
  EXPECT_TRUE(verify_tag(t, t));
  Tag u = t;
  u.value.flip(79);
  EXPECT_FALSE(verify_tag(t, u));
  EXPECT_THROW(verify_tag(t, Tag{BitString(8)}), DimensionError);
}

TEST(VerifyTag, RandomEightBitMatchRate) {
  Rng rng(7);
  const int trials = 100000;
  int hits = 0;
  for (int i = 0; i < trials; ++i)
    if (verify_tag(Tag{BitString::random(8, rng)}, Tag{BitString::random(8, rng)})) ++hits;
  const double expect = trials / 256.0, sd = std::sqrt(trials * (1.0 / 256) * (255.0 / 256));
  EXPECT_NEAR(hits, expect, 4 * sd);
}

TEST(PrivacyAmplify, EmptyOutputAndDeterminism) {
  Rng rng(8);
  EXPECT_TRUE(privacy_amplify(ToeplitzSeed{}, BitString::random(10, rng), 0).empty());
  const auto s = ToeplitzSeed::random(32, 500, rng);
  const BitString x = BitString::random(500, rng);
  EXPECT_EQ(privacy_amplify(s, x, 32), privacy_amplify(s, x, 32));
  EXPECT_THROW(privacy_amplify(s, x, 501), ConfigError);
  EXPECT_THROW(privacy_amplify(s, x, 31), DimensionError);
}

TEST(AffineTag, DistinguishesZeroPaddedPrefixes) {
  Rng rng(10);
  const auto s = ToeplitzSeed::random(64, 200, rng);
  // The leading constant bit makes the empty message hash to a nonzero value.
  EXPECT_NE(affine_tag(s, BitString{}).value, BitString(64));
  EXPECT_THROW(affine_tag(s, BitString(200)), DimensionError);
}

TEST(SeedWire, RoundTrip) {
  Rng rng(11);
  const auto s = ToeplitzSeed::random(9, 40, rng);
  Bytes w;
  serialize_into(w, s);
  std::size_t off = 0;
  EXPECT_EQ(deserialize_seed(w, off), s);
  EXPECT_EQ(off, w.size());
}
