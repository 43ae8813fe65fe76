#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "msaw/errors.hpp"

namespace msaw::data {

/// 8-bit single-channel image, row-major.
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  bool operator==(const GrayImage&) const = default;
};

/// Binary PGM (P5) with maxval 255.
inline std::string encode_pgm(const GrayImage& image) {
  if (image.pixels.size() != image.width * image.height) throw ContractError("encode_pgm: pixel count does not match extents");
  std::string out = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.append(image.pixels.begin(), image.pixels.end());
  return out;
}

inline GrayImage decode_pgm(std::span<const char> bytes, const std::string& origin = "image") {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&](const char* what) {
    skip_space();
    std::size_t value = 0, digits = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      value = value * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
      if (++digits > 9) throw ParseError(origin + ": PGM " + what + " too large");
    }
    if (digits == 0) throw ParseError(origin + ": PGM header missing " + what);
    return value;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw ParseError(origin + ": not a binary PGM (P5)");
  pos = 2;
  GrayImage image;
  image.width = read_int("width");
  image.height = read_int("height");
  const std::size_t maxval = read_int("maxval");
  if (maxval != 255) throw ParseError(origin + ": PGM maxval must be 255, got " + std::to_string(maxval));
  if (image.width == 0 || image.height == 0) throw ParseError(origin + ": PGM has zero extent");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw ParseError(origin + ": PGM header not terminated");
  ++pos;
  const std::size_t count = image.width * image.height;
  if (bytes.size() - pos < count) throw ParseError(origin + ": PGM pixel data truncated");
  image.pixels.assign(reinterpret_cast<const std::uint8_t*>(bytes.data() + pos),
                      reinterpret_cast<const std::uint8_t*>(bytes.data() + pos + count));
  return image;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline GrayImage read_pgm(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  return decode_pgm(bytes, path.string());
}

inline void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  write_file(path, encode_pgm(image));
}

/// Pixel values divided by 255.
inline std::vector<float> normalize(const GrayImage& image) {
  std::vector<float> out(image.pixels.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(image.pixels[i]) / 255.0f;
  return out;
}

/// Inverse of normalize(): clamps to [0,1] and rounds to the nearest level.
inline GrayImage quantize(std::span<const float> values, std::size_t width, std::size_t height) {
  if (values.size() != width * height) throw ContractError("quantize: value count does not match extents");
  GrayImage image{width, height, std::vector<std::uint8_t>(values.size())};
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float v = std::clamp(values[i], 0.0f, 1.0f);
    image.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return image;
}

}  // namespace msaw::data
