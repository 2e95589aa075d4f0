// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace appledefect {

enum class DefectClass { bruise, stain, rot };

inline constexpr std::array<DefectClass, 3> kDefectClasses = {DefectClass::bruise, DefectClass::stain,
                                                              DefectClass::rot};

std::string_view to_string(DefectClass c);
std::optional<DefectClass> parse_defect_class(std::string_view s);

/// One paired capture. Paths are relative to the owning manifest's root.
struct CaptureRecord {
  std::string fruit_id;
  int view_index = 0;
  DefectClass defect_class = DefectClass::bruise;
  std::filesystem::path visible_path;
  std::filesystem::path narrowband_path;
  std::optional<std::filesystem::path> mask_path;

  friend bool operator==(const CaptureRecord&, const CaptureRecord&) = default;
};

struct Manifest {
  std::filesystem::path root;  // directory the record paths are relative to
  std::vector<std::string> class_names = {"bruise", "stain", "rot"};
  std::vector<CaptureRecord> records;

  std::filesystem::path resolve(const std::filesystem::path& p) const { return root / p; }
  /// Position of the record's class in class_names (the classifier label).
  int label_of(const CaptureRecord& r) const;
  bool has_masks() const;
};

Manifest load_manifest(const std::filesystem::path& path);
/// Writes canonical JSON; record paths are rewritten relative to path's directory.
void save_manifest(const Manifest& m, const std::filesystem::path& path);
/// Canonical JSON text as save_manifest would write it for a manifest rooted at `root`.
std::string manifest_to_json(const Manifest& m, const std::filesystem::path& root);

/// Same records, paths re-expressed relative to new_root.
Manifest rebase(const Manifest& m, const std::filesystem::path& new_root);

struct ManifestIssue {
  enum class Kind { MissingFile, DuplicateTriple, MissingMask };
  Kind kind;
  std::vector<std::size_t> record_indices;
  std::string message;
};

struct ValidateOptions {
  bool require_masks = false;
};

std::vector<ManifestIssue> validate_manifest(const Manifest& m, ValidateOptions opts = {});

struct SplitSpec {
  double val_fraction = 0.2;
  std::uint64_t seed = 42;
};

/// Fruit-grouped split: every view of a fruit lands on the same side.
std::pair<Manifest, Manifest> split_grouped(const Manifest& m, const SplitSpec& s);

std::map<DefectClass, std::size_t> class_distribution(const Manifest& m);

}  // namespace appledefect
