#pragma once

// Git-style content hashes: sha1("blob <size>\0" + bytes), lowercase hex.
// Requires linking OpenSSL::Crypto.

#include <fstream>
#include <iterator>
#include <memory>
#include <string>
#include <string_view>

#include <openssl/evp.h>

#include "dran/tensor.hpp"

namespace dran {

inline std::string sha1_hex(std::string_view bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(),
                                                              &EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
    throw Error("sha1: digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

inline std::string git_blob_hash(std::string_view bytes) {
  std::string buf = "blob " + std::to_string(bytes.size());
  buf.push_back('\0');
  buf.append(bytes);
  return sha1_hex(buf);
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string git_file_hash(const std::string& path) {
  return git_blob_hash(read_file_bytes(path));
}

}  // namespace dran
