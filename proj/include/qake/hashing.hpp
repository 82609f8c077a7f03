#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <span>

#include "qake/bits.hpp"
#include "qake/errors.hpp"

namespace qake {

// Generator of an out_len x msg_len Toeplitz matrix with T[i][j] = bits[i - j + msg_len - 1].
struct ToeplitzSeed {
  BitString bits;
  std::size_t out_len = 0;
  std::size_t msg_len = 0;

  ToeplitzSeed() = default;
  ToeplitzSeed(BitString b, std::size_t out, std::size_t msg)
      : bits(std::move(b)), out_len(out), msg_len(msg) {
    validate();
  }

  template <class R>
  static ToeplitzSeed random(std::size_t out, std::size_t msg, R& rng) {
    if (out == 0 && msg == 0) return ToeplitzSeed{};
    return ToeplitzSeed(BitString::random(out + msg - 1, rng), out, msg);
  }

  void validate() const {
    if (msg_len == 0) throw DimensionError("toeplitz seed needs msg_len >= 1");
    if (out_len == 0) throw DimensionError("toeplitz seed needs out_len >= 1");
    if (bits.size() != out_len + msg_len - 1)
      throw DimensionError("toeplitz seed length must be out_len + msg_len - 1");
  }

  bool operator==(const ToeplitzSeed&) const = default;
};

struct Tag {
  BitString value;
  std::size_t bit_length() const { return value.size(); }
  bool operator==(const Tag&) const = default;
};

struct MaskKey {
  BitString value;
  bool operator==(const MaskKey&) const = default;
};

namespace detail {

// Row i of T dotted with m equals the parity of seed[i .. i+msg_len) AND reverse(m),
// so every output bit is a sliding window over the seed. Work is done one
// 64-bit chunk at a time.
inline BitString toeplitz_apply(const ToeplitzSeed& seed, const BitString& message) {
  const std::size_t m = seed.msg_len;
  BitString rev(m);
  const auto& mw = message.words();
  for (std::size_t w = 0; w < mw.size(); ++w)
    for (std::uint64_t x = mw[w]; x != 0; x &= x - 1)
      rev.set(m - 1 - (64 * w + static_cast<std::size_t>(std::countr_zero(x))), true);
  const auto& rw = rev.words();
  // Zero words contribute nothing; zero-padded messages leave long runs of them.
  std::size_t lo = 0, hi = rw.size();
  while (lo < hi && rw[lo] == 0) ++lo;
  while (hi > lo && rw[hi - 1] == 0) --hi;
  BitString out(seed.out_len);
  for (std::size_t i = 0; i < seed.out_len; ++i) {
    std::uint64_t acc = 0;
    for (std::size_t k = lo; k < hi; ++k) acc ^= seed.bits.word_at(i + 64 * k) & rw[k];
    if (std::popcount(acc) & 1) out.set(i, true);
  }
  return out;
}

}  // namespace detail

inline BitString toeplitz_hash(const ToeplitzSeed& seed, const BitString& message) {
  seed.validate();
  if (message.size() != seed.msg_len)
    throw DimensionError("message length " + std::to_string(message.size()) +
                         " does not match seed msg_len " + std::to_string(seed.msg_len));
  return detail::toeplitz_apply(seed, message);
}

inline Tag masked_tag(const ToeplitzSeed& hash_seed, const MaskKey& mask, const BitString& message) {
  if (mask.value.size() != hash_seed.out_len) throw DimensionError("mask length differs from hash output");
  return Tag{toeplitz_hash(hash_seed, message) ^ mask.value};
}

inline bool verify_tag(const Tag& expected, const Tag& received) {
  if (expected.bit_length() != received.bit_length()) throw DimensionError("tag lengths differ");
  // Fold every word so the comparison does not exit early.
  std::uint64_t diff = 0;
  const auto& a = expected.value.words();
  const auto& b = received.value.words();
  for (std::size_t k = 0; k < a.size(); ++k) diff |= a[k] ^ b[k];
  return diff == 0;
}

inline BitString privacy_amplify(const ToeplitzSeed& seed, const BitString& input, std::size_t out_len) {
  if (out_len > input.size()) throw ConfigError("cannot extract more bits than the input holds");
  if (out_len == 0) return BitString{};
  if (seed.out_len != out_len || seed.msg_len != input.size())
    throw DimensionError("extraction seed is not dimensioned for this input/output");
  return toeplitz_hash(seed, input);
}

// Zero-pads a message up to the seed's capacity. The transcript encodings fed
// through here are self-delimiting, so padding keeps distinct messages distinct.
inline BitString pad_to(const BitString& message, std::size_t len) {
  if (message.size() > len) throw DimensionError("message exceeds hash capacity");
  BitString out = message;
  out.resize(len);
  return out;
}

// h(x) = T (1 || x). The constant leading bit turns the linear family into an
// affine one whose output is uniform for every fixed x.
inline Tag affine_tag(const ToeplitzSeed& seed, const BitString& message) {
  BitString in;
  in.push_back(true);
  in.append(message);
  return Tag{toeplitz_hash(seed, pad_to(in, seed.msg_len))};
}

inline void serialize_into(Bytes& out, const ToeplitzSeed& s) {
  put_u32(out, static_cast<std::uint32_t>(s.out_len));
  put_u32(out, static_cast<std::uint32_t>(s.msg_len));
  serialize_into(out, s.bits);
}

inline ToeplitzSeed deserialize_seed(std::span<const std::uint8_t> in, std::size_t& off) {
  const std::size_t out_len = get_u32(in, off);
  const std::size_t msg_len = get_u32(in, off);
  BitString bits = deserialize_bits(in, off);
  return ToeplitzSeed(std::move(bits), out_len, msg_len);
}

}  // namespace qake
