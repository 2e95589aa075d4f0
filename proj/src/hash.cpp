// SPDX-License-Identifier: Apache-2.0
#include "appledefect/hash.hpp"

#include <cstdio>
#include <fstream>
#include <vector>

#include "appledefect/error.hpp"
#include "appledefect/rng.hpp"

namespace appledefect {

std::string to_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string Fnv1a::hex() const { return to_hex(state_); }

std::uint64_t hash_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  Fnv1a h;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto n = static_cast<std::size_t>(in.gcount());
    h.update({reinterpret_cast<const std::uint8_t*>(buf.data()), n});
  }
  return h.digest();
}

std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::string_view> names) {
  Fnv1a h;
  h.update(master);
  for (auto n : names) {
    h.update(n);
    h.update(std::string_view("\x1f", 1));
  }
  return splitmix64(h.digest());
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(master ^ splitmix64(a)) ^ splitmix64(b + 0x51ed27ULL));
}

}  // namespace appledefect
