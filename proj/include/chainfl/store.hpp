#pragma once

// Content-addressed off-chain storage. Chains carry only SHA-256 digests of
// canonical blobs; the blobs live here.
//
// Canonical ParamVector blob: u64 little-endian dim, then dim IEEE-754 binary64
// values, each little-endian.

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "chainfl/error.hpp"
#include "chainfl/model_math.hpp"

namespace chainfl {

using Blob = std::vector<std::uint8_t>;

class ContentHash {
 public:
  static constexpr std::size_t size = 32;

  ContentHash() = default;
  explicit ContentHash(const std::array<std::uint8_t, size>& digest) : digest_(digest) {}

  static ContentHash of(std::span<const std::uint8_t> bytes) {
    std::array<std::uint8_t, size> d{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), d.data(), &len, EVP_sha256(), nullptr) != 1 || len != size) {
      throw error(errc::corruption, "sha256 digest failed");
    }
    return ContentHash(d);
  }

  static ContentHash of(std::string_view text) {
    return of(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }

  static ContentHash from_hex(std::string_view hex) {
    if (hex.size() != 2 * size) throw error(errc::validation, "content hash must be 64 hex chars");
    std::array<std::uint8_t, size> d{};
    for (std::size_t i = 0; i < size; ++i) {
      d[i] = static_cast<std::uint8_t>((nibble(hex[2 * i]) << 4) | nibble(hex[2 * i + 1]));
    }
    return ContentHash(d);
  }

  std::string hex() const {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(2 * size, '0');
    for (std::size_t i = 0; i < size; ++i) {
      out[2 * i] = digits[digest_[i] >> 4];
      out[2 * i + 1] = digits[digest_[i] & 0xf];
    }
    return out;
  }

  const std::array<std::uint8_t, size>& bytes() const noexcept { return digest_; }

  friend auto operator<=>(const ContentHash&, const ContentHash&) = default;

 private:
  static int nibble(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw error(errc::validation, "bad hex digit");
  }

  std::array<std::uint8_t, size> digest_{};
};

namespace detail {

inline void put_u64_le(Blob& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t get_u64_le(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[at + i]) << (8 * i);
  return v;
}

}  // namespace detail

inline Blob serialize(const ParamVector& w) {
  Blob out;
  out.reserve(8 + 8 * w.dim());
  detail::put_u64_le(out, w.dim());
  for (double v : w.values()) detail::put_u64_le(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline ParamVector deserialize_params(std::span<const std::uint8_t> blob) {
  if (blob.size() < 8) throw error(errc::corruption, "param blob shorter than header");
  const std::uint64_t dim = detail::get_u64_le(blob, 0);
  if (blob.size() != 8 + 8 * dim) throw error(errc::corruption, "param blob length does not match dim header");
  std::vector<double> values(dim);
  for (std::uint64_t i = 0; i < dim; ++i) values[i] = std::bit_cast<double>(detail::get_u64_le(blob, 8 + 8 * i));
  return ParamVector(std::move(values));
}

class Store {
 public:
  virtual ~Store() = default;

  virtual ContentHash put(const Blob& blob) = 0;
  // Throws errc::not_found for unknown digests, errc::corruption when stored
  // bytes no longer hash to their key.
  virtual Blob get(const ContentHash& hash) const = 0;
  virtual bool contains(const ContentHash& hash) const = 0;
  virtual std::size_t size() const = 0;

  ContentHash put_params(const ParamVector& w) { return put(serialize(w)); }
  ParamVector get_params(const ContentHash& hash) const { return deserialize_params(get(hash)); }
};

class MemoryStore final : public Store {
 public:
  explicit MemoryStore(bool verify_on_get = true) : verify_(verify_on_get) {}

  ContentHash put(const Blob& blob) override {
    const auto h = ContentHash::of(blob);
    std::lock_guard lock(mu_);
    objects_.try_emplace(h, blob);
    return h;
  }

  Blob get(const ContentHash& hash) const override {
    std::lock_guard lock(mu_);
    auto it = objects_.find(hash);
    if (it == objects_.end()) throw error(errc::not_found, "no object " + hash.hex());
    if (verify_ && ContentHash::of(it->second) != hash) throw error(errc::corruption, "digest mismatch " + hash.hex());
    return it->second;
  }

  bool contains(const ContentHash& hash) const override {
    std::lock_guard lock(mu_);
    return objects_.count(hash) != 0;
  }

  std::size_t size() const override {
    std::lock_guard lock(mu_);
    return objects_.size();
  }

  // Test hook: overwrite stored bytes without rehashing.
  void tamper(const ContentHash& hash, Blob bytes) {
    std::lock_guard lock(mu_);
    objects_.at(hash) = std::move(bytes);
  }

 private:
  bool verify_;
  mutable std::mutex mu_;
  std::map<ContentHash, Blob> objects_;
};

// Append-only directory backend: objects/<first-2-hex>/<digest-hex>.
class FileStore final : public Store {
 public:
  explicit FileStore(std::filesystem::path root) : root_(std::move(root)) {
    std::error_code ec;
    std::filesystem::create_directories(root_ / "objects", ec);
    if (ec) throw error(errc::io, "cannot create store at " + root_.string() + ": " + ec.message());
  }

  ContentHash put(const Blob& blob) override {
    const auto h = ContentHash::of(blob);
    const auto path = object_path(h);
    std::lock_guard lock(mu_);
    if (std::filesystem::exists(path)) return h;
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw error(errc::io, "cannot create " + path.parent_path().string());
    const auto tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
      if (!out) throw error(errc::io, "write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw error(errc::io, "rename failed for " + path.string());
    return h;
  }

  Blob get(const ContentHash& hash) const override {
    const auto path = object_path(hash);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw error(errc::not_found, "no object " + hash.hex());
    Blob data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (ContentHash::of(data) != hash) throw error(errc::corruption, "digest mismatch " + hash.hex());
    return data;
  }

  bool contains(const ContentHash& hash) const override { return std::filesystem::exists(object_path(hash)); }

  std::size_t size() const override {
    std::size_t n = 0;
    for (const auto& e : std::filesystem::recursive_directory_iterator(root_ / "objects")) {
      if (e.is_regular_file() && e.path().extension() != ".tmp") ++n;
    }
    return n;
  }

  std::filesystem::path object_path(const ContentHash& h) const {
    const auto hex = h.hex();
    return root_ / "objects" / hex.substr(0, 2) / hex;
  }

 private:
  std::filesystem::path root_;
  std::mutex mu_;
};

}  // namespace chainfl
