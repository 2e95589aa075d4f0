// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace appledefect {

/// Single-file archive: JSON metadata plus named float64 arrays.
///
/// Layout (little endian): "ADCKPT01" | u64 meta_len | meta bytes | u32 count |
/// count x (u32 name_len | name | u64 n | n x f64) | u64 FNV-1a of all preceding bytes.
struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, std::vector<double>>> arrays;

  const std::vector<double>* find(const std::string& name) const;
};

void save_archive(const std::filesystem::path& path, const Archive& archive);
/// Throws Error(CorruptCheckpoint) on bad magic, truncation, or checksum mismatch.
Archive load_archive(const std::filesystem::path& path);

}  // namespace appledefect
