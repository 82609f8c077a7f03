#pragma once

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "qake/errors.hpp"

namespace qake {

using Bytes = std::vector<std::uint8_t>;

// Packed bit sequence. Bit i lives in word i/64 at position i%64, so the byte
// view is least-significant-bit first. Bits past size() are kept at zero.
class BitString {
 public:
  BitString() = default;
  explicit BitString(std::size_t n, bool value = false)
      : words_((n + 63) / 64, value ? ~std::uint64_t{0} : 0), size_(n) {
    trim();
  }

  static BitString from_bits(std::initializer_list<int> bits) {
    BitString out;
    for (int b : bits) out.push_back(b != 0);
    return out;
  }

  static BitString from_bytes(std::span<const std::uint8_t> bytes, std::size_t nbits) {
    if (nbits > bytes.size() * 8) throw DimensionError("bit count exceeds byte buffer");
    BitString out(nbits);
    for (std::size_t i = 0; i < (nbits + 7) / 8; ++i)
      out.words_[i / 8] |= std::uint64_t{bytes[i]} << (8 * (i % 8));
    out.trim();
    return out;
  }

  static BitString from_bytes(std::span<const std::uint8_t> bytes) {
    return from_bytes(bytes, bytes.size() * 8);
  }

  template <class Rng>
  static BitString random(std::size_t n, Rng& rng) {
    BitString out(n);
    for (auto& w : out.words_) w = rng();
    out.trim();
    return out;
  }

  std::size_t size() const { return size_; }
  bool empty() const { return size_ == 0; }

  bool get(std::size_t i) const { return (words_[i >> 6] >> (i & 63)) & 1u; }
  bool operator[](std::size_t i) const { return get(i); }
  void set(std::size_t i, bool v) {
    const std::uint64_t m = std::uint64_t{1} << (i & 63);
    if (v)
      words_[i >> 6] |= m;
    else
      words_[i >> 6] &= ~m;
  }
  void flip(std::size_t i) { words_[i >> 6] ^= std::uint64_t{1} << (i & 63); }

  void push_back(bool v) {
    if ((size_ & 63) == 0) words_.push_back(0);
    ++size_;
    set(size_ - 1, v);
  }

  void resize(std::size_t n) {
    words_.resize((n + 63) / 64, 0);
    size_ = n;
    trim();
  }

  void append(const BitString& other) {
    const std::size_t old = size_;
    resize(size_ + other.size_);
    const unsigned shift = old & 63;
    const std::size_t base = old >> 6;
    for (std::size_t k = 0; k < other.words_.size(); ++k) {
      const std::uint64_t w = other.words_[k];
      words_[base + k] |= w << shift;
      if (shift != 0 && base + k + 1 < words_.size()) words_[base + k + 1] |= w >> (64 - shift);
    }
    trim();
  }

  // Appends the low `nbits` bits of v, least significant first.
  void append_uint(std::uint64_t v, unsigned nbits) {
    for (unsigned i = 0; i < nbits; ++i) push_back((v >> i) & 1u);
  }

  void append_bytes(std::span<const std::uint8_t> bytes) { append(from_bytes(bytes)); }

  BitString slice(std::size_t pos, std::size_t len) const {
    if (pos + len > size_) throw DimensionError("slice out of range");
    BitString out(len);
    for (std::size_t k = 0; k < out.words_.size(); ++k) out.words_[k] = word_at(pos + 64 * k);
    out.trim();
    return out;
  }

  // 64 bits starting at bit offset `pos`; positions past the end read as zero.
  std::uint64_t word_at(std::size_t pos) const {
    const std::size_t w = pos >> 6;
    const unsigned s = pos & 63;
    if (w >= words_.size()) return 0;
    std::uint64_t lo = words_[w] >> s;
    if (s != 0 && w + 1 < words_.size()) lo |= words_[w + 1] << (64 - s);
    return lo;
  }

  BitString& operator^=(const BitString& o) {
    if (o.size_ != size_) throw DimensionError("xor of bit strings with different lengths");
    for (std::size_t k = 0; k < words_.size(); ++k) words_[k] ^= o.words_[k];
    return *this;
  }
  friend BitString operator^(BitString a, const BitString& b) { return a ^= b; }

  bool operator==(const BitString& o) const = default;

  std::size_t popcount() const {
    std::size_t c = 0;
    for (auto w : words_) c += static_cast<std::size_t>(std::popcount(w));
    return c;
  }

  Bytes to_bytes() const {
    Bytes out((size_ + 7) / 8);
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = static_cast<std::uint8_t>(words_[i / 8] >> (8 * (i % 8)));
    return out;
  }

  std::string to_string() const {
    std::string s(size_, '0');
    for (std::size_t i = 0; i < size_; ++i)
      if (get(i)) s[i] = '1';
    return s;
  }

  const std::vector<std::uint64_t>& words() const { return words_; }

 private:
  void trim() {
    if (size_ & 63) words_.back() &= (std::uint64_t{1} << (size_ & 63)) - 1;
  }

  std::vector<std::uint64_t> words_;
  std::size_t size_ = 0;
};

inline void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t& off) {
  if (off + 4 > in.size()) throw FormatError("truncated u32");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{in[off + i]} << (8 * i);
  off += 4;
  return v;
}

// Wire format: u32 little-endian bit count, then the packed bits.
inline void serialize_into(Bytes& out, const BitString& b) {
  if (b.size() > 0xffffffffu) throw DimensionError("bit string too long to serialize");
  put_u32(out, static_cast<std::uint32_t>(b.size()));
  const Bytes packed = b.to_bytes();
  out.insert(out.end(), packed.begin(), packed.end());
}

inline Bytes serialize(const BitString& b) {
  Bytes out;
  serialize_into(out, b);
  return out;
}

inline BitString deserialize_bits(std::span<const std::uint8_t> in, std::size_t& off) {
  const std::uint32_t n = get_u32(in, off);
  const std::size_t nbytes = (std::size_t{n} + 7) / 8;
  if (off + nbytes > in.size()) throw FormatError("truncated bit string");
  // Unused high bits of the last byte must be zero so each value has one encoding.
  if (n % 8 != 0 && (in[off + nbytes - 1] >> (n % 8)) != 0) throw FormatError("nonzero padding bits");
  BitString b = BitString::from_bytes(in.subspan(off, nbytes), n);
  off += nbytes;
  return b;
}

inline std::string to_hex(std::span<const std::uint8_t> bytes) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  s.reserve(bytes.size() * 2);
  for (auto b : bytes) {
    s.push_back(digits[b >> 4]);
    s.push_back(digits[b & 15]);
  }
  return s;
}

inline Bytes from_hex(const std::string& s) {
  if (s.size() % 2) throw FormatError("odd-length hex string");
  auto nib = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw FormatError(std::string("bad hex digit '") + c + "'");
  };
  Bytes out(s.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<std::uint8_t>(nib(s[2 * i]) << 4 | nib(s[2 * i + 1]));
  return out;
}

// splitmix64 finalizer, used to derive independent sub-seeds from (seed, stream).
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return mix64(mix64(seed) ^ mix64(stream + 0x632be59bd9b4e019ULL));
}

using Rng = std::mt19937_64;

}  // namespace qake
