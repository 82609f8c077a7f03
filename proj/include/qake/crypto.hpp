#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <memory>
#include <span>

#include "qake/bits.hpp"
#include "qake/errors.hpp"

namespace qake {

using Digest256 = std::array<std::uint8_t, 32>;

inline Digest256 sha256(std::span<const std::uint8_t> data) {
  Digest256 out{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 || len != out.size())
    throw DomainError("SHA-256 failed");
  return out;
}

// AES-256-CTR keystream of `nbytes` bytes; the key is the SHA-256 of `seed`
// and the counter starts from zero.
inline Bytes aes_ctr_stream(std::span<const std::uint8_t> seed, std::size_t nbytes) {
  const Digest256 key = sha256(seed);
  std::array<std::uint8_t, 16> iv{};
  std::unique_ptr<EVP_CIPHER_CTX, decltype(&EVP_CIPHER_CTX_free)> ctx(EVP_CIPHER_CTX_new(), EVP_CIPHER_CTX_free);
  if (!ctx || EVP_EncryptInit_ex(ctx.get(), EVP_aes_256_ctr(), nullptr, key.data(), iv.data()) != 1)
    throw DomainError("AES-CTR init failed");
  Bytes zeros(nbytes, 0), out(nbytes + 16, 0);
  int len = 0;
  if (nbytes > 0 &&
      EVP_EncryptUpdate(ctx.get(), out.data(), &len, zeros.data(), static_cast<int>(nbytes)) != 1)
    throw DomainError("AES-CTR update failed");
  out.resize(nbytes);
  return out;
}

}  // namespace qake
