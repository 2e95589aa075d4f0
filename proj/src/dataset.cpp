// SPDX-License-Identifier: Apache-2.0
#include "appledefect/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "appledefect/error.hpp"
#include "appledefect/rng.hpp"

namespace appledefect {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(DefectClass c) {
  switch (c) {
    case DefectClass::bruise: return "bruise";
    case DefectClass::stain: return "stain";
    case DefectClass::rot: return "rot";
  }
  return "?";
}

std::optional<DefectClass> parse_defect_class(std::string_view s) {
  for (auto c : kDefectClasses) {
    if (to_string(c) == s) return c;
  }
  return std::nullopt;
}

int Manifest::label_of(const CaptureRecord& r) const {
  const auto name = to_string(r.defect_class);
  const auto it = std::find(class_names.begin(), class_names.end(), name);
  if (it == class_names.end()) {
    throw Error(ErrorCode::LabelOutOfRange, "class '" + std::string(name) + "' not in class_names");
  }
  return static_cast<int>(it - class_names.begin());
}

bool Manifest::has_masks() const {
  return !records.empty() &&
         std::all_of(records.begin(), records.end(), [](const CaptureRecord& r) { return r.mask_path.has_value(); });
}

namespace {

fs::path normalized_absolute(const fs::path& p) { return fs::absolute(p).lexically_normal(); }

fs::path relative_to(const fs::path& p, const fs::path& root) {
  auto rel = normalized_absolute(p).lexically_relative(normalized_absolute(root));
  return rel.empty() ? normalized_absolute(p) : rel;
}

[[noreturn]] void parse_error(const std::string& what) { throw Error(ErrorCode::ManifestParseError, what); }

std::string require_string(const json& j, const char* key, std::size_t index) {
  if (!j.contains(key) || !j[key].is_string()) {
    parse_error("record " + std::to_string(index) + ": field '" + key + "' must be a string");
  }
  return j[key].get<std::string>();
}

void check_class_names(const std::vector<std::string>& names) {
  if (names.size() != 3) parse_error("class_names must have exactly 3 entries");
  std::set<std::string> seen;
  for (const auto& n : names) {
    if (!parse_defect_class(n)) parse_error("unknown class name '" + n + "' in class_names");
    if (!seen.insert(n).second) parse_error("duplicate class name '" + n + "'");
  }
}

}  // namespace

Manifest load_manifest(const fs::path& path) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) throw Error(ErrorCode::ManifestNotFound, path.string());
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::ManifestNotFound, path.string());

  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    parse_error(path.string() + ": " + e.what());
  }
  if (!doc.is_object()) parse_error("top level must be an object");

  Manifest m;
  m.root = path.parent_path();
  if (m.root.empty()) m.root = ".";
  if (!doc.contains("class_names") || !doc["class_names"].is_array()) parse_error("missing class_names array");
  m.class_names.clear();
  for (const auto& n : doc["class_names"]) {
    if (!n.is_string()) parse_error("class_names entries must be strings");
    m.class_names.push_back(n.get<std::string>());
  }
  check_class_names(m.class_names);

  if (!doc.contains("records") || !doc["records"].is_array()) parse_error("missing records array");
  std::size_t index = 0;
  for (const auto& jr : doc["records"]) {
    if (!jr.is_object()) parse_error("record " + std::to_string(index) + " is not an object");
    CaptureRecord r;
    r.fruit_id = require_string(jr, "fruit_id", index);
    if (!jr.contains("view_index") || !jr["view_index"].is_number_integer() || jr["view_index"].get<long long>() < 0) {
      parse_error("record " + std::to_string(index) + ": view_index must be a non-negative integer");
    }
    r.view_index = jr["view_index"].get<int>();
    const auto cls = require_string(jr, "defect_class", index);
    const auto parsed = parse_defect_class(cls);
    if (!parsed || std::find(m.class_names.begin(), m.class_names.end(), cls) == m.class_names.end()) {
      parse_error("record " + std::to_string(index) + ": unknown defect_class '" + cls + "'");
    }
    r.defect_class = *parsed;
    r.visible_path = require_string(jr, "visible_path", index);
    r.narrowband_path = require_string(jr, "narrowband_path", index);
    if (jr.contains("mask_path") && !jr["mask_path"].is_null()) {
      if (!jr["mask_path"].is_string()) {
        parse_error("record " + std::to_string(index) + ": mask_path must be a string or null");
      }
      r.mask_path = jr["mask_path"].get<std::string>();
    }
    m.records.push_back(std::move(r));
    ++index;
  }
  return m;
}

std::string manifest_to_json(const Manifest& m, const fs::path& root) {
  json doc;
  doc["class_names"] = m.class_names;
  json records = json::array();
  for (const auto& r : m.records) {
    json jr;
    jr["fruit_id"] = r.fruit_id;
    jr["view_index"] = r.view_index;
    jr["defect_class"] = std::string(to_string(r.defect_class));
    jr["visible_path"] = relative_to(m.resolve(r.visible_path), root).generic_string();
    jr["narrowband_path"] = relative_to(m.resolve(r.narrowband_path), root).generic_string();
    jr["mask_path"] = r.mask_path ? json(relative_to(m.resolve(*r.mask_path), root).generic_string()) : json(nullptr);
    records.push_back(std::move(jr));
  }
  doc["records"] = std::move(records);
  return doc.dump(2) + "\n";
}

void save_manifest(const Manifest& m, const fs::path& path) {
  auto root = path.parent_path();
  if (root.empty()) root = ".";
  std::error_code ec;
  fs::create_directories(root, ec);
  const auto text = manifest_to_json(m, root);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::OutputNotWritable, path.string());
  out << text;
  if (!out) throw Error(ErrorCode::OutputNotWritable, path.string());
}

Manifest rebase(const Manifest& m, const fs::path& new_root) {
  Manifest out;
  out.root = new_root;
  out.class_names = m.class_names;
  out.records.reserve(m.records.size());
  for (const auto& r : m.records) {
    auto nr = r;
    nr.visible_path = relative_to(m.resolve(r.visible_path), new_root);
    nr.narrowband_path = relative_to(m.resolve(r.narrowband_path), new_root);
    if (r.mask_path) nr.mask_path = relative_to(m.resolve(*r.mask_path), new_root);
    out.records.push_back(std::move(nr));
  }
  return out;
}

std::vector<ManifestIssue> validate_manifest(const Manifest& m, ValidateOptions opts) {
  std::vector<ManifestIssue> issues;
  auto check_file = [&](std::size_t i, const fs::path& p, const char* what) {
    std::error_code ec;
    if (!fs::is_regular_file(m.resolve(p), ec)) {
      issues.push_back({ManifestIssue::Kind::MissingFile, {i},
                        "record " + std::to_string(i) + ": " + what + " file missing: " + p.generic_string()});
    }
  };
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& r = m.records[i];
    check_file(i, r.visible_path, "visible");
    check_file(i, r.narrowband_path, "narrowband");
    if (r.mask_path) {
      check_file(i, *r.mask_path, "mask");
    } else if (opts.require_masks) {
      issues.push_back({ManifestIssue::Kind::MissingMask, {i}, "record " + std::to_string(i) + ": no mask_path"});
    }
  }

  std::map<std::tuple<std::string, int, DefectClass>, std::vector<std::size_t>> by_triple;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& r = m.records[i];
    by_triple[{r.fruit_id, r.view_index, r.defect_class}].push_back(i);
  }
  std::vector<ManifestIssue> dups;
  for (auto& [key, indices] : by_triple) {
    if (indices.size() < 2) continue;
    std::ostringstream msg;
    msg << "duplicate (" << std::get<0>(key) << ", " << std::get<1>(key) << ", " << to_string(std::get<2>(key))
        << ") at records";
    for (auto i : indices) msg << ' ' << i;
    dups.push_back({ManifestIssue::Kind::DuplicateTriple, indices, msg.str()});
  }
  std::sort(dups.begin(), dups.end(),
            [](const ManifestIssue& a, const ManifestIssue& b) { return a.record_indices < b.record_indices; });
  issues.insert(issues.end(), dups.begin(), dups.end());
  return issues;
}

std::pair<Manifest, Manifest> split_grouped(const Manifest& m, const SplitSpec& s) {
  if (!(s.val_fraction >= 0.0 && s.val_fraction < 1.0)) {
    throw Error(ErrorCode::DegenerateSplit, "val_fraction must lie in [0, 1)");
  }
  Manifest train{m.root, m.class_names, {}};
  Manifest val{m.root, m.class_names, {}};
  if (s.val_fraction == 0.0) {
    train.records = m.records;
    return {train, val};
  }

  std::set<std::string> unique;
  for (const auto& r : m.records) unique.insert(r.fruit_id);
  std::vector<std::string> fruits(unique.begin(), unique.end());
  if (fruits.size() < 2) {
    throw Error(ErrorCode::DegenerateSplit,
                "need at least 2 distinct fruit ids for a validation split, have " + std::to_string(fruits.size()));
  }
  const auto total = static_cast<long long>(fruits.size());
  const auto n_val = std::clamp(std::llround(s.val_fraction * static_cast<double>(total)), 1LL, total - 1);

  Rng rng(derive_seed(s.seed, {"split"}));
  rng.shuffle(std::span<std::string>(fruits));
  const std::set<std::string> val_fruits(fruits.begin(), fruits.begin() + n_val);

  for (const auto& r : m.records) {
    (val_fruits.contains(r.fruit_id) ? val : train).records.push_back(r);
  }
  return {train, val};
}

std::map<DefectClass, std::size_t> class_distribution(const Manifest& m) {
  std::map<DefectClass, std::size_t> counts;
  for (auto c : kDefectClasses) counts[c] = 0;
  for (const auto& r : m.records) ++counts[r.defect_class];
  return counts;
}

}  // namespace appledefect
