#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "msaw/data/manifest.hpp"
#include "msaw/data/pgm.hpp"
#include "msaw/errors.hpp"

// Synthetic SAR-like ship chips: an oriented hull mask with a tapered bow,
// multiplicative exponential speckle and low-level exponential sea clutter.

namespace msaw::data {

inline constexpr double kMetersPerPixel = 10.0;

enum class BrightnessProfile { uniform, bow_bright, stern_bright };

inline std::string to_string(BrightnessProfile p) {
  switch (p) {
    case BrightnessProfile::uniform: return "uniform";
    case BrightnessProfile::bow_bright: return "bow-bright";
    case BrightnessProfile::stern_bright: return "stern-bright";
  }
  return "uniform";
}

inline BrightnessProfile parse_brightness_profile(const std::string& s) {
  if (s == "uniform") return BrightnessProfile::uniform;
  if (s == "bow-bright") return BrightnessProfile::bow_bright;
  if (s == "stern-bright") return BrightnessProfile::stern_bright;
  throw ConfigError("unknown brightness profile '" + s + "' (expected uniform, bow-bright or stern-bright)");
}

struct SyntheticClassSpec {
  std::string name;
  std::array<double, 2> length_range{};  // meters
  std::array<double, 2> width_range{};   // meters
  BrightnessProfile brightness = BrightnessProfile::uniform;
  double texture_scale = 0.0;

  void validate() const {
    if (name.empty()) throw ConfigError("class spec needs a name");
    for (const auto* r : {&length_range, &width_range}) {
      if (!((*r)[0] > 0.0) || !((*r)[0] < (*r)[1]) || !std::isfinite((*r)[1]))
        throw ConfigError("class '" + name + "': ranges must satisfy 0 < min < max");
    }
    if (!(texture_scale >= 0.0 && texture_scale < 1.0)) throw ConfigError("class '" + name + "': texture_scale must be in [0,1)");
  }
};

/// Six ship types with realistic, partly overlapping size ranges.
inline std::vector<SyntheticClassSpec> default_class_specs(std::size_t classes = 3) {
  std::vector<SyntheticClassSpec> all = {
      {"Bulk Carrier", {150, 275}, {23, 38}, BrightnessProfile::uniform, 0.10},
      {"Container Ship", {180, 360}, {25, 45}, BrightnessProfile::stern_bright, 0.35},
      {"Tanker", {120, 280}, {18, 48}, BrightnessProfile::bow_bright, 0.05},
      {"Cargo", {100, 220}, {15, 32}, BrightnessProfile::uniform, 0.20},
      {"Fishing", {90, 130}, {10, 22}, BrightnessProfile::uniform, 0.0},
      {"General Cargo", {90, 200}, {15, 33}, BrightnessProfile::uniform, 0.15},
  };
  if (classes != 3 && classes != 6) throw ConfigError("class layout must be 3 or 6, got " + std::to_string(classes));
  all.resize(classes);
  return all;
}

/// Three classes whose length and width ranges do not intersect.
inline std::vector<SyntheticClassSpec> separable_class_specs() {
  return {
      {"Bulk Carrier", {90, 130}, {10, 16}, BrightnessProfile::uniform, 0.10},
      {"Container Ship", {190, 240}, {22, 28}, BrightnessProfile::stern_bright, 0.35},
      {"Tanker", {300, 360}, {36, 48}, BrightnessProfile::bow_bright, 0.05},
  };
}

/// Parses either a bare array of class objects or {"classes": [...]}. Each
/// object has name, length_range [min,max], width_range [min,max],
/// brightness_profile and texture_scale (optional, default 0).
inline std::vector<SyntheticClassSpec> parse_class_specs(const std::string& text, const std::string& origin = "spec") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(origin + ": " + e.what());
  }
  const nlohmann::json& list = j.is_object() && j.contains("classes") ? j.at("classes") : j;
  if (!list.is_array() || list.empty()) throw ConfigError(origin + ": expected a non-empty array of class specs");
  std::vector<SyntheticClassSpec> out;
  try {
    for (const auto& c : list) {
      SyntheticClassSpec s;
      s.name = c.at("name").get<std::string>();
      s.length_range = c.at("length_range").get<std::array<double, 2>>();
      s.width_range = c.at("width_range").get<std::array<double, 2>>();
      s.brightness = parse_brightness_profile(c.value("brightness_profile", std::string("uniform")));
      s.texture_scale = c.value("texture_scale", 0.0);
      s.validate();
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return out;
}

inline nlohmann::json class_specs_to_json(const std::vector<SyntheticClassSpec>& specs) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& s : specs) {
    list.push_back({{"name", s.name},
                    {"length_range", s.length_range},
                    {"width_range", s.width_range},
                    {"brightness_profile", to_string(s.brightness)},
                    {"texture_scale", s.texture_scale}});
  }
  return {{"classes", list}};
}

/// Placement of one hull in pixel units. The bow points along +angle.
struct ShipGeometry {
  double length_m = 0.0;
  double width_m = 0.0;
  double angle = 0.0;  // radians
  double cx = 0.0;
  double cy = 0.0;

  double length_px() const { return length_m / kMetersPerPixel; }
  double width_px() const { return width_m / kMetersPerPixel; }
};

/// Coordinates of pixel centre (x, y) in the hull frame: u along the keel
/// (bow positive), v across.
inline std::array<double, 2> hull_coordinates(const ShipGeometry& g, double x, double y) {
  const double dx = x - g.cx, dy = y - g.cy;
  const double c = std::cos(g.angle), s = std::sin(g.angle);
  return {dx * c + dy * s, -dx * s + dy * c};
}

inline bool inside_hull(const ShipGeometry& g, double u, double v) {
  const double len = g.length_px(), half_w = g.width_px() / 2.0;
  if (u < -len / 2.0 || u > len / 2.0) return false;
  const double taper = 0.2 * len;
  const double bow_start = len / 2.0 - taper;
  double limit = half_w;
  if (u > bow_start) {
    const double tip = std::max(half_w / 2.0, 0.5);
    limit = half_w + (tip - half_w) * (u - bow_start) / taper;
  }
  return std::abs(v) <= limit;
}

/// Binary hull mask sampled at pixel centres.
inline std::vector<std::uint8_t> hull_mask(const ShipGeometry& g, std::size_t size) {
  std::vector<std::uint8_t> mask(size * size, 0);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const auto [u, v] = hull_coordinates(g, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
      mask[y * size + x] = inside_hull(g, u, v) ? 1 : 0;
    }
  }
  return mask;
}

/// Extent of a mask along and across the given orientation, in pixels,
/// counting the covered pixel centres plus one pixel pitch.
inline std::array<double, 2> measure_mask(const std::vector<std::uint8_t>& mask, std::size_t size, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
  bool any = false;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      if (!mask[y * size + x]) continue;
      any = true;
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      const double u = px * c + py * s, v = -px * s + py * c;
      umin = std::min(umin, u);
      umax = std::max(umax, u);
      vmin = std::min(vmin, v);
      vmax = std::max(vmax, v);
    }
  }
  if (!any) return {0.0, 0.0};
  return {umax - umin + 1.0, vmax - vmin + 1.0};
}

struct RenderSettings {
  std::size_t size = 64;
  double base_intensity = 0.55;
  double clutter_mean = 0.04;
  double center_jitter = 2.0;  // pixels
};

struct RenderedShip {
  GrayImage image;
  ShipGeometry geometry;
};

/// Relative brightness along the keel; u in [-L/2, L/2].
inline double brightness_at(BrightnessProfile p, double u, double len) {
  const double t = std::clamp(u / len + 0.5, 0.0, 1.0);  // 0 at stern, 1 at bow
  switch (p) {
    case BrightnessProfile::uniform: return 1.0;
    case BrightnessProfile::bow_bright: return 0.5 + 1.0 * t;
    case BrightnessProfile::stern_bright: return 1.5 - 1.0 * t;
  }
  return 1.0;
}

inline RenderedShip render_ship(const SyntheticClassSpec& spec, std::mt19937_64& rng, const RenderSettings& rs = {}) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  RenderedShip out;
  ShipGeometry& g = out.geometry;
  g.length_m = spec.length_range[0] + (spec.length_range[1] - spec.length_range[0]) * unit(rng);
  g.width_m = spec.width_range[0] + (spec.width_range[1] - spec.width_range[0]) * unit(rng);
  g.angle = 2.0 * std::numbers::pi * unit(rng);
  const double mid = static_cast<double>(rs.size) / 2.0;
  g.cx = mid + rs.center_jitter * (2.0 * unit(rng) - 1.0);
  g.cy = mid + rs.center_jitter * (2.0 * unit(rng) - 1.0);

  std::exponential_distribution<double> speckle(1.0);
  std::exponential_distribution<double> clutter(1.0 / rs.clutter_mean);
  const double len = g.length_px();
  std::vector<float> pixels(rs.size * rs.size);
  for (std::size_t y = 0; y < rs.size; ++y) {
    for (std::size_t x = 0; x < rs.size; ++x) {
      const auto [u, v] = hull_coordinates(g, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
      double value = clutter(rng);
      if (inside_hull(g, u, v)) {
        const double texture = 1.0 + spec.texture_scale * std::cos(2.0 * std::numbers::pi * u / 5.0);
        value += rs.base_intensity * brightness_at(spec.brightness, u, len) * texture * speckle(rng);
      }
      pixels[y * rs.size + x] = static_cast<float>(std::clamp(value, 0.0, 1.0));
    }
  }
  out.image = quantize(pixels, rs.size, rs.size);
  return out;
}

/// Independent stream for one rendered sample.
inline std::mt19937_64 sample_rng(std::uint64_t seed, std::size_t split, std::size_t label, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(split), static_cast<std::uint32_t>(label),
                    static_cast<std::uint32_t>(index), 0x5eedu};
  return std::mt19937_64(seq);
}

/// Renders n_train + n_test chips per class into out_dir/images and writes
/// manifest.csv, classes.txt, geometry.csv and spec.json. Output depends only
/// on the arguments.
inline Manifest generate_synthetic(const std::vector<SyntheticClassSpec>& specs, std::size_t n_train,
                                   std::size_t n_test, std::uint64_t seed, const std::filesystem::path& out_dir,
                                   const RenderSettings& rs = {}) {
  namespace fs = std::filesystem;
  if (specs.empty()) throw ConfigError("generate_synthetic: no class specs");
  for (const auto& s : specs) s.validate();
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());

  Manifest manifest;
  manifest.root = out_dir;
  for (const auto& s : specs) manifest.classes.push_back(s.name);
  std::ostringstream geometry;
  geometry << "id,label,length_m,width_m,angle_rad,cx,cy\n";
  geometry.precision(17);
  const std::array<std::pair<Split, std::size_t>, 2> splits{{{Split::train, n_train}, {Split::test, n_test}}};
  for (const auto& [split, count] : splits) {
    for (std::size_t label = 0; label < specs.size(); ++label) {
      for (std::size_t i = 0; i < count; ++i) {
        auto rng = sample_rng(seed, static_cast<std::size_t>(split), label, i);
        const RenderedShip ship = render_ship(specs[label], rng, rs);
        const std::string id = to_string(split) + "_c" + std::to_string(label) + "_" + std::to_string(i);
        const fs::path rel = fs::path("images") / (id + ".pgm");
        write_pgm(out_dir / rel, ship.image);
        manifest.entries.push_back({rel, label, split, id});
        const auto& g = ship.geometry;
        geometry << id << ',' << label << ',' << g.length_m << ',' << g.width_m << ',' << g.angle << ',' << g.cx << ','
                 << g.cy << '\n';
      }
    }
  }
  write_manifest(out_dir / "manifest.csv", manifest);
  write_file(out_dir / "geometry.csv", geometry.str());
  write_file(out_dir / "spec.json", class_specs_to_json(specs).dump(2) + "\n");
  return manifest;
}

}  // namespace msaw::data
