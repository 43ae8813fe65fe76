#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "msaw/errors.hpp"

namespace msaw::data {

/// One draw of a class-balanced epoch. `sample` indexes the train split.
struct EpochEntry {
  std::size_t sample = 0;
  std::size_t label = 0;
  bool flip = false;
  int dx = 0;
  int dy = 0;

  bool operator==(const EpochEntry&) const = default;
};

inline constexpr int kMaxShift = 4;

/// Draws exactly `target_per_class` entries per class, uniformly with
/// replacement within the class, then shuffles the whole list. With `augment`
/// each draw also gets a random horizontal flip and a shift in [-4, 4] pixels.
inline std::vector<EpochEntry> balance_resample(std::span<const std::size_t> labels,
                                                const std::vector<std::string>& class_names,
                                                std::size_t target_per_class, std::uint64_t seed, std::uint64_t epoch,
                                                bool augment = false) {
  if (target_per_class == 0) throw ConfigError("balance target must be positive");
  std::vector<std::vector<std::size_t>> members(class_names.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= members.size()) throw ContractError("balance_resample: label out of range");
    members[labels[i]].push_back(i);
  }
  for (std::size_t k = 0; k < members.size(); ++k)
    if (members[k].empty()) throw ContractError("class '" + class_names[k] + "' has no training samples");

  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32), 0xba1au};
  std::mt19937_64 rng(seq);
  std::vector<EpochEntry> out;
  out.reserve(target_per_class * members.size());
  for (std::size_t k = 0; k < members.size(); ++k) {
    std::uniform_int_distribution<std::size_t> pick(0, members[k].size() - 1);
    for (std::size_t r = 0; r < target_per_class; ++r) out.push_back({members[k][pick(rng)], k});
  }
  std::shuffle(out.begin(), out.end(), rng);
  if (augment) {
    std::bernoulli_distribution coin(0.5);
    std::uniform_int_distribution<int> shift(-kMaxShift, kMaxShift);
    for (auto& e : out) {
      e.flip = coin(rng);
      e.dx = shift(rng);
      e.dy = shift(rng);
    }
  }
  return out;
}

/// Applies an entry's flip and shift to a size x size image; uncovered
/// pixels become 0.
inline std::vector<float> augment_image(std::span<const float> image, std::size_t size, const EpochEntry& e) {
  if (!e.flip && e.dx == 0 && e.dy == 0) return {image.begin(), image.end()};
  std::vector<float> out(size * size, 0.0f);
  const auto n = static_cast<long>(size);
  for (long y = 0; y < n; ++y) {
    const long sy = y - e.dy;
    if (sy < 0 || sy >= n) continue;
    for (long x = 0; x < n; ++x) {
      long sx = x - e.dx;
      if (sx < 0 || sx >= n) continue;
      if (e.flip) sx = n - 1 - sx;
      out[static_cast<std::size_t>(y * n + x)] = image[static_cast<std::size_t>(sy * n + sx)];
    }
  }
  return out;
}

}  // namespace msaw::data
