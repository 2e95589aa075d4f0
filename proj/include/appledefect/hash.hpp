// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace appledefect {

/// 64-bit FNV-1a. Used for cache keys and checkpoint checksums, not security.
class Fnv1a {
 public:
  Fnv1a& update(std::span<const std::uint8_t> bytes) {
    for (auto b : bytes) {
      state_ ^= b;
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  Fnv1a& update(std::string_view s) {
    return update({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
  }
  Fnv1a& update(std::uint64_t v) {
    std::uint8_t le[8];
    for (int i = 0; i < 8; ++i) le[i] = static_cast<std::uint8_t>(v >> (8 * i));
    return update(std::span<const std::uint8_t>(le, 8));
  }
  std::uint64_t digest() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string to_hex(std::uint64_t v);

/// Hash of a file's bytes; throws Error(IoError) if unreadable.
std::uint64_t hash_file(const std::filesystem::path& path);

}  // namespace appledefect
