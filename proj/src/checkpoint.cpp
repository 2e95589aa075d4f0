// SPDX-License-Identifier: Apache-2.0
#include "appledefect/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

#include "appledefect/error.hpp"
#include "appledefect/hash.hpp"

namespace appledefect {

namespace {

constexpr char kMagic[8] = {'A', 'D', 'C', 'K', 'P', 'T', '0', '1'};

template <typename T>
void put(std::string& out, T v) {
  static_assert(std::endian::native == std::endian::little, "archive format assumes little endian hosts");
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& data, std::size_t end) : data_(data), end_(end) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw Error(ErrorCode::CorruptCheckpoint, "archive truncated");
  }
  const std::string& data_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

const std::vector<double>* Archive::find(const std::string& name) const {
  for (const auto& [n, v] : arrays) {
    if (n == name) return &v;
  }
  return nullptr;
}

void save_archive(const std::filesystem::path& path, const Archive& archive) {
  std::string out(kMagic, sizeof kMagic);
  const auto meta = archive.meta.dump();
  put<std::uint64_t>(out, meta.size());
  out += meta;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(archive.arrays.size()));
  for (const auto& [name, values] : archive.arrays) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint64_t>(out, values.size());
    out.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double));
  }
  Fnv1a h;
  h.update(out);
  put<std::uint64_t>(out, h.digest());

  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  // Write-then-rename so an interrupted save never leaves a half-written checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorCode::OutputNotWritable, tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error(ErrorCode::OutputNotWritable, tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::OutputNotWritable, path.string() + ": " + ec.message());
}

Archive load_archive(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  const std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (data.size() < sizeof kMagic + 8 || std::memcmp(data.data(), kMagic, sizeof kMagic) != 0) {
    throw Error(ErrorCode::CorruptCheckpoint, path.string() + ": bad header");
  }
  const std::size_t body = data.size() - 8;
  std::uint64_t stored;
  std::memcpy(&stored, data.data() + body, 8);
  Fnv1a h;
  h.update(std::string_view(data.data(), body));
  if (h.digest() != stored) throw Error(ErrorCode::CorruptCheckpoint, path.string() + ": checksum mismatch");

  Reader r(data, body);
  r.bytes(sizeof kMagic);
  Archive a;
  try {
    a.meta = nlohmann::json::parse(r.bytes(r.get<std::uint64_t>()));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptCheckpoint, path.string() + ": " + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.bytes(r.get<std::uint32_t>());
    const auto n = r.get<std::uint64_t>();
    if (n > (body - r.pos()) / sizeof(double)) throw Error(ErrorCode::CorruptCheckpoint, "array length out of range");
    std::vector<double> values(n);
    const auto raw = r.bytes(n * sizeof(double));
    std::memcpy(values.data(), raw.data(), raw.size());
    a.arrays.emplace_back(std::move(name), std::move(values));
  }
  if (r.pos() != body) throw Error(ErrorCode::CorruptCheckpoint, path.string() + ": trailing bytes");
  return a;
}

}  // namespace appledefect
