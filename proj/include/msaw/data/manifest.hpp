#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "msaw/data/pgm.hpp"
#include "msaw/errors.hpp"

namespace msaw::data {

enum class Split { train = 0, test = 1 };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

struct ManifestEntry {
  std::filesystem::path path;  // relative to Manifest::root unless absolute
  std::size_t label = 0;
  Split split = Split::train;
  std::string id;
};

struct Manifest {
  std::filesystem::path root;
  std::vector<std::string> classes;
  std::vector<ManifestEntry> entries;

  std::size_t num_classes() const { return classes.size(); }

  std::filesystem::path resolve(const ManifestEntry& e) const { return e.path.is_absolute() ? e.path : root / e.path; }

  std::vector<ManifestEntry> split(Split s) const {
    std::vector<ManifestEntry> out;
    std::copy_if(entries.begin(), entries.end(), std::back_inserter(out), [&](const ManifestEntry& e) { return e.split == s; });
    return out;
  }

  /// Smallest per-class count of a split.
  std::size_t min_count(Split s) const {
    std::size_t m = 0;
    for (std::size_t k = 0; k < classes.size(); ++k) m = k ? std::min(m, count(s, k)) : count(s, k);
    return m;
  }

  std::size_t count(Split s, std::size_t label) const {
    return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [&](const ManifestEntry& e) {
      return e.split == s && e.label == label;
    }));
  }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out(1);
  for (char ch : line) {
    if (ch == ',') out.emplace_back();
    else out.back() += ch;
  }
  return out;
}

inline std::string strip_cr(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n')) s.pop_back();
  return s;
}

}  // namespace detail

/// One class name per line.
inline std::vector<std::string> read_class_list(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) {
    line = detail::strip_cr(line);
    if (line.empty()) continue;
    if (std::find(out.begin(), out.end(), line) != out.end()) throw ParseError(path.string() + ": duplicate class '" + line + "'");
    out.push_back(line);
  }
  if (out.empty()) throw ParseError(path.string() + ": empty class list");
  return out;
}

/// Reads `path,label,split`. The class set is, in order of preference,
/// `classes`, a classes.txt beside the manifest, or the labels in order of
/// first appearance.
inline Manifest load_manifest(const std::filesystem::path& path,
                              std::optional<std::vector<std::string>> classes = std::nullopt) {
  namespace fs = std::filesystem;
  if (!fs::exists(path)) throw IoError("manifest not found: " + path.string());
  Manifest m;
  m.root = path.parent_path();
  const bool fixed = classes.has_value() || fs::exists(m.root / "classes.txt");
  if (classes) m.classes = *classes;
  else if (fixed) m.classes = read_class_list(m.root / "classes.txt");

  std::istringstream in(read_file(path));
  std::string line;
  std::size_t line_no = 0;
  const std::string origin = path.string();
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::strip_cr(line);
    if (line_no == 1) {
      if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
      if (line != "path,label,split") throw ParseError(origin + ": header must be 'path,label,split'", line_no);
      continue;
    }
    if (line.empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != 3) throw ParseError(origin + ": expected 3 fields, got " + std::to_string(fields.size()), line_no);
    const std::string& rel = fields[0];
    const std::string& label = fields[1];
    const std::string& split = fields[2];
    if (rel.empty()) throw ParseError(origin + ": empty path", line_no);
    ManifestEntry e;
    e.path = fs::path(rel);
    e.id = e.path.stem().string();
    if (split == "train") e.split = Split::train;
    else if (split == "test") e.split = Split::test;
    else throw ParseError(origin + ": split must be train or test, got '" + split + "'", line_no);
    auto it = std::find(m.classes.begin(), m.classes.end(), label);
    if (it == m.classes.end()) {
      if (fixed) throw ParseError(origin + ": unknown label '" + label + "'", line_no);
      if (label.empty()) throw ParseError(origin + ": empty label", line_no);
      m.classes.push_back(label);
      it = m.classes.end() - 1;
    }
    e.label = static_cast<std::size_t>(it - m.classes.begin());
    if (!fs::exists(m.resolve(e))) throw ParseError(origin + ": image not found: " + m.resolve(e).string(), line_no);
    m.entries.push_back(std::move(e));
  }
  if (line_no == 0) throw ParseError(origin + ": missing header");
  if (m.entries.empty()) throw ParseError(origin + ": no samples");
  return m;
}

/// Writes the manifest CSV and a classes.txt beside it.
inline void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  std::string csv = "path,label,split\n";
  for (const auto& e : m.entries) {
    if (e.label >= m.classes.size()) throw ContractError("write_manifest: label out of range");
    csv += e.path.generic_string() + "," + m.classes[e.label] + "," + to_string(e.split) + "\n";
  }
  write_file(path, csv);
  std::string names;
  for (const auto& c : m.classes) names += c + "\n";
  write_file(path.parent_path() / "classes.txt", names);
}

/// Normalized single-channel chip.
struct Sample {
  std::vector<float> image;  // size*size, values in [0,1]
  std::size_t label = 0;
  std::string id;
};

/// Reads one manifest entry; the image must be size x size.
inline Sample load_sample(const Manifest& m, const ManifestEntry& e, std::size_t size = 64) {
  const GrayImage img = read_pgm(m.resolve(e));
  if (img.width != size || img.height != size)
    throw ParseError(m.resolve(e).string() + ": expected " + std::to_string(size) + "x" + std::to_string(size) +
                     " image, got " + std::to_string(img.width) + "x" + std::to_string(img.height));
  return Sample{normalize(img), e.label, e.id};
}

/// Entries of one split with their images decoded on first use.
class Dataset {
 public:
  Dataset(const Manifest& manifest, Split split, std::size_t size = 64)
      : manifest_(manifest), entries_(manifest.split(split)), size_(size), cache_(entries_.size()) {}

  std::size_t size() const { return entries_.size(); }
  std::size_t image_size() const { return size_; }
  std::size_t num_classes() const { return manifest_.num_classes(); }
  const std::vector<std::string>& classes() const { return manifest_.classes; }
  const ManifestEntry& entry(std::size_t i) const { return entries_.at(i); }
  std::size_t label(std::size_t i) const { return entries_.at(i).label; }

  const Sample& sample(std::size_t i) {
    auto& slot = cache_.at(i);
    if (!slot) slot = load_sample(manifest_, entries_[i], size_);
    return *slot;
  }

  /// Indices of each class, in manifest order.
  std::vector<std::vector<std::size_t>> by_class() const {
    std::vector<std::vector<std::size_t>> out(num_classes());
    for (std::size_t i = 0; i < entries_.size(); ++i) out[entries_[i].label].push_back(i);
    return out;
  }

 private:
  Manifest manifest_;
  std::vector<ManifestEntry> entries_;
  std::size_t size_;
  std::vector<std::optional<Sample>> cache_;
};

}  // namespace msaw::data
