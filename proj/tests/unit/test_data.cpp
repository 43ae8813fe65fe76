#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "msaw/data/balance.hpp"
#include "msaw/data/manifest.hpp"
#include "msaw/data/pgm.hpp"
#include "msaw/data/synthetic.hpp"

using namespace msaw;
using namespace msaw::data;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("msaw_data_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool ranges_overlap(const std::array<double, 2>& a, const std::array<double, 2>& b) {
  return a[0] < b[1] && b[0] < a[1];
}

std::size_t error_line(const fs::path& manifest) {
  try {
    load_manifest(manifest);
  } catch (const ParseError& e) {
    return e.line();
  }
  return 0;
}

}  // namespace

TEST(Pgm, EncodeDecodeRoundTrip) {
  GrayImage img{3, 2, {0, 1, 2, 253, 254, 255}};
  const std::string bytes = encode_pgm(img);
  EXPECT_EQ(bytes.substr(0, 11), "P5\n3 2\n255\n");
  EXPECT_EQ(decode_pgm(bytes), img);
  EXPECT_EQ(encode_pgm(decode_pgm(bytes)), bytes);
}

TEST(Pgm, CommentsInHeader) {
  std::string bytes = "P5\n# made by hand\n2 1\n255\n";
  bytes += '\x07';
  bytes += '\x09';
  auto img = decode_pgm(bytes);
  EXPECT_EQ(img.width, 2u);
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{7, 9}));
}

TEST(Pgm, MalformedInputs) {
  EXPECT_THROW(decode_pgm(std::string("P2\n1 1\n255\n0")), ParseError);
  EXPECT_THROW(decode_pgm(std::string("P5\n2 2\n255\nab")), ParseError);
  EXPECT_THROW(decode_pgm(std::string("P5\n1 1\n65535\n\0\0", 15)), ParseError);
  EXPECT_THROW(decode_pgm(std::string("P5\n0 1\n255\n")), ParseError);
  EXPECT_THROW(decode_pgm(std::string("P5\n")), ParseError);
}

TEST(Pgm, QuantizeInvertsNormalize) {
  GrayImage img{256, 1, {}};
  for (int i = 0; i < 256; ++i) img.pixels.push_back(static_cast<std::uint8_t>(i));
  const auto values = normalize(img);
  EXPECT_EQ(values.front(), 0.0f);
  EXPECT_EQ(values.back(), 1.0f);
  EXPECT_EQ(quantize(values, 256, 1), img);
  const std::vector<float> out_of_range{-0.5f, 1.5f};
  EXPECT_EQ(quantize(out_of_range, 2, 1).pixels, (std::vector<std::uint8_t>{0, 255}));
}

TEST(Pgm, FileRoundTripIsByteIdentical) {
  auto dir = scratch("pgm");
  std::mt19937_64 rng(4);
  auto ship = render_ship(default_class_specs()[0], rng);
  write_pgm(dir / "a.pgm", ship.image);
  const auto first = read_file(dir / "a.pgm");
  write_pgm(dir / "b.pgm", read_pgm(dir / "a.pgm"));
  EXPECT_EQ(read_file(dir / "b.pgm"), first);
  EXPECT_THROW(read_pgm(dir / "missing.pgm"), IoError);
  fs::remove_all(dir);
}

TEST(Synthetic, DefaultLayouts) {
  auto three = default_class_specs(3);
  ASSERT_EQ(three.size(), 3u);
  EXPECT_EQ(three[0].name, "Bulk Carrier");
  EXPECT_EQ(three[1].name, "Container Ship");
  EXPECT_EQ(three[2].name, "Tanker");
  auto six = default_class_specs(6);
  ASSERT_EQ(six.size(), 6u);
  EXPECT_EQ(six[5].name, "General Cargo");
  EXPECT_THROW(default_class_specs(4), ConfigError);
}

TEST(Synthetic, BulkCarrierAndGeneralCargoOverlap) {
  const auto six = default_class_specs(6);
  EXPECT_TRUE(ranges_overlap(six[0].length_range, six[5].length_range));
  EXPECT_TRUE(ranges_overlap(six[0].width_range, six[5].width_range));
}

TEST(Synthetic, SeparablePresetDoesNotOverlap) {
  const auto s = separable_class_specs();
  for (std::size_t a = 0; a < s.size(); ++a)
    for (std::size_t b = a + 1; b < s.size(); ++b) {
      EXPECT_FALSE(ranges_overlap(s[a].length_range, s[b].length_range));
      EXPECT_FALSE(ranges_overlap(s[a].width_range, s[b].width_range));
    }
}

// Sampled sizes overlap between two classes exactly when their ranges do.
TEST(Synthetic, SampledSupportsOverlapIffRangesOverlap) {
  auto sample_lengths = [](const SyntheticClassSpec& spec, std::uint64_t seed) {
    std::vector<double> out;
    for (std::size_t i = 0; i < 300; ++i) {
      auto rng = sample_rng(seed, 0, 0, i);
      out.push_back(render_ship(spec, rng).geometry.length_m);
    }
    return out;
  };
  const auto six = default_class_specs(6);
  const auto sep = separable_class_specs();
  for (const auto& [a, b] : {std::pair{six[0], six[5]}, std::pair{sep[0], sep[1]}, std::pair{sep[1], sep[2]}}) {
    const auto la = sample_lengths(a, 1), lb = sample_lengths(b, 2);
    const double lo = std::max(*std::min_element(la.begin(), la.end()), *std::min_element(lb.begin(), lb.end()));
    const double hi = std::min(*std::max_element(la.begin(), la.end()), *std::max_element(lb.begin(), lb.end()));
    EXPECT_EQ(lo < hi, ranges_overlap(a.length_range, b.length_range)) << a.name << " / " << b.name;
    for (double l : la) {
      EXPECT_GE(l, a.length_range[0]);
      EXPECT_LE(l, a.length_range[1]);
    }
  }
}

// The rendered hull extent matches the sampled length and width to within a
// pixel. Only hulls that fit inside the chip are measured.
TEST(Synthetic, RenderedGeometryWithinOnePixel) {
  std::size_t measured = 0;
  for (const auto& spec : separable_class_specs()) {
    for (std::size_t i = 0; i < 40; ++i) {
      auto rng = sample_rng(9, 0, 0, i);
      const auto ship = render_ship(spec, rng);
      const auto& g = ship.geometry;
      if (g.length_px() > 60.0) continue;
      const auto mask = hull_mask(g, 64);
      const auto [len, wid] = measure_mask(mask, 64, g.angle);
      EXPECT_NEAR(len, g.length_px(), 1.0) << spec.name << " " << i;
      EXPECT_NEAR(wid, g.width_px(), 1.0) << spec.name << " " << i;
      ++measured;
    }
  }
  EXPECT_GT(measured, 80u);
}

TEST(Synthetic, HullIsBrighterThanSea) {
  std::mt19937_64 rng(3);
  const auto ship = render_ship(default_class_specs()[2], rng);
  const auto mask = hull_mask(ship.geometry, 64);
  double in = 0, out = 0;
  std::size_t ni = 0, no = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) (mask[i] ? (in += ship.image.pixels[i], ++ni) : (out += ship.image.pixels[i], ++no));
  EXPECT_GT(in / static_cast<double>(ni), 4.0 * out / static_cast<double>(no));
}

TEST(Synthetic, BrightnessProfiles) {
  EXPECT_DOUBLE_EQ(brightness_at(BrightnessProfile::uniform, 3.0, 10.0), 1.0);
  EXPECT_GT(brightness_at(BrightnessProfile::bow_bright, 5.0, 10.0), brightness_at(BrightnessProfile::bow_bright, -5.0, 10.0));
  EXPECT_LT(brightness_at(BrightnessProfile::stern_bright, 5.0, 10.0), brightness_at(BrightnessProfile::stern_bright, -5.0, 10.0));
  EXPECT_THROW(parse_brightness_profile("glowing"), ConfigError);
}

TEST(Synthetic, SpecJsonRoundTripAndValidation) {
  const auto specs = default_class_specs(6);
  const auto back = parse_class_specs(class_specs_to_json(specs).dump());
  ASSERT_EQ(back.size(), specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) {
    EXPECT_EQ(back[i].name, specs[i].name);
    EXPECT_EQ(back[i].length_range, specs[i].length_range);
    EXPECT_EQ(back[i].brightness, specs[i].brightness);
  }
  EXPECT_THROW(parse_class_specs("{"), ParseError);
  EXPECT_THROW(parse_class_specs("[]"), ConfigError);
  EXPECT_THROW(parse_class_specs(R"([{"name":"x","length_range":[5,4],"width_range":[1,2]}])"), ConfigError);
  EXPECT_THROW(parse_class_specs(R"([{"name":"x","width_range":[1,2]}])"), ConfigError);
}

TEST(Synthetic, GenerationIsDeterministic) {
  auto a = scratch("gen_a"), b = scratch("gen_b");
  generate_synthetic(default_class_specs(), 2, 1, 77, a);
  generate_synthetic(default_class_specs(), 2, 1, 77, b);
  for (const auto& name : {"manifest.csv", "classes.txt", "geometry.csv", "spec.json", "images/train_c1_1.pgm", "images/test_c2_0.pgm"})
    EXPECT_EQ(read_file(a / name), read_file(b / name)) << name;
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Manifest, LoadsGeneratedSet) {
  auto dir = scratch("manifest_gen");
  generate_synthetic(default_class_specs(6), 3, 2, 5, dir);
  const auto m = load_manifest(dir / "manifest.csv");
  EXPECT_EQ(m.classes, (std::vector<std::string>{"Bulk Carrier", "Container Ship", "Tanker", "Cargo", "Fishing", "General Cargo"}));
  EXPECT_EQ(m.entries.size(), 6u * 5u);
  for (std::size_t k = 0; k < 6; ++k) {
    EXPECT_EQ(m.count(Split::train, k), 3u);
    EXPECT_EQ(m.count(Split::test, k), 2u);
  }
  Dataset ds(m, Split::train);
  EXPECT_EQ(ds.size(), 18u);
  EXPECT_EQ(ds.sample(4).image.size(), 64u * 64u);
  fs::remove_all(dir);
}

TEST(Manifest, ErrorsCarryLineNumbers) {
  auto dir = scratch("manifest_err");
  write_pgm(dir / "a.pgm", GrayImage{64, 64, std::vector<std::uint8_t>(64 * 64, 9)});
  auto write = [&](const std::string& body) { write_file(dir / "manifest.csv", body); };

  write("path,label,split\na.pgm,Tanker,train\na.pgm,Tanker,validate\n");
  EXPECT_EQ(error_line(dir / "manifest.csv"), 3u);
  write("path,label,split\na.pgm,Tanker\n");
  EXPECT_EQ(error_line(dir / "manifest.csv"), 2u);
  write("path,label,split\na.pgm,Tanker,train\n\nb.pgm,Tanker,test\n");
  EXPECT_EQ(error_line(dir / "manifest.csv"), 4u);
  write("file,class,split\na.pgm,Tanker,train\n");
  EXPECT_EQ(error_line(dir / "manifest.csv"), 1u);
  write("path,label,split\r\na.pgm,Tanker,train\r\n");
  EXPECT_EQ(load_manifest(dir / "manifest.csv").entries.size(), 1u);

  write_file(dir / "classes.txt", "Bulk Carrier\nTanker\n");
  write("path,label,split\na.pgm,Tanker,train\na.pgm,Fishing,test\n");
  EXPECT_EQ(error_line(dir / "manifest.csv"), 3u);
  fs::remove_all(dir);
}

TEST(Manifest, NoSamples) {
  auto dir = scratch("manifest_empty");
  write_file(dir / "manifest.csv", "path,label,split\n");
  try {
    load_manifest(dir / "manifest.csv");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("no samples"), std::string::npos);
  }
  EXPECT_THROW(load_manifest(dir / "absent.csv"), IoError);
  fs::remove_all(dir);
}

TEST(Manifest, ClassListDrivesLabelOrder) {
  auto dir = scratch("manifest_order");
  write_pgm(dir / "a.pgm", GrayImage{64, 64, std::vector<std::uint8_t>(64 * 64, 9)});
  write_file(dir / "manifest.csv", "path,label,split\na.pgm,Tanker,train\na.pgm,Bulk Carrier,train\n");
  auto first_seen = load_manifest(dir / "manifest.csv");
  EXPECT_EQ(first_seen.classes, (std::vector<std::string>{"Tanker", "Bulk Carrier"}));
  auto fixed = load_manifest(dir / "manifest.csv", std::vector<std::string>{"Bulk Carrier", "Container Ship", "Tanker"});
  EXPECT_EQ(fixed.entries[0].label, 2u);
  EXPECT_EQ(fixed.entries[1].label, 0u);
  EXPECT_EQ(fixed.count(Split::train, 1), 0u);
  fs::remove_all(dir);
}

TEST(Manifest, WrongImageSize) {
  auto dir = scratch("manifest_size");
  write_pgm(dir / "a.pgm", GrayImage{8, 8, std::vector<std::uint8_t>(64, 9)});
  write_file(dir / "manifest.csv", "path,label,split\na.pgm,Tanker,train\n");
  auto m = load_manifest(dir / "manifest.csv");
  EXPECT_THROW(load_sample(m, m.entries[0]), ParseError);
  fs::remove_all(dir);
}

TEST(Balance, ExactCountsPerClass) {
  std::vector<std::size_t> labels;
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < 5 + 40 * k; ++i) labels.push_back(k);
  const std::vector<std::string> names{"a", "b", "c"};
  for (std::uint64_t epoch = 0; epoch < 4; ++epoch) {
    const auto list = balance_resample(labels, names, 200, 11, epoch);
    ASSERT_EQ(list.size(), 600u);
    std::map<std::size_t, std::size_t> per;
    for (const auto& e : list) {
      ++per[e.label];
      EXPECT_EQ(labels[e.sample], e.label);
    }
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(per[k], 200u);
  }
}

// Draws within a class are uniform over its members: chi-square over 50000
// draws from 10 members stays below the 0.999 quantile (27.88 at 9 dof).
TEST(Balance, WithinClassDrawsAreUniform) {
  std::vector<std::size_t> labels(10, 0);
  labels.push_back(1);
  std::vector<double> hits(10, 0);
  for (std::uint64_t epoch = 0; epoch < 50; ++epoch)
    for (const auto& e : balance_resample(labels, {"a", "b"}, 1000, 3, epoch))
      if (e.label == 0) hits[e.sample] += 1;
  double chi = 0;
  for (double h : hits) chi += (h - 5000.0) * (h - 5000.0) / 5000.0;
  EXPECT_LT(chi, 27.88);
}

TEST(Balance, DeterministicAndEpochDependent) {
  std::vector<std::size_t> labels{0, 0, 1, 1, 1, 2};
  const std::vector<std::string> names{"a", "b", "c"};
  EXPECT_EQ(balance_resample(labels, names, 20, 5, 1), balance_resample(labels, names, 20, 5, 1));
  EXPECT_NE(balance_resample(labels, names, 20, 5, 1), balance_resample(labels, names, 20, 5, 2));
  EXPECT_NE(balance_resample(labels, names, 20, 5, 1), balance_resample(labels, names, 20, 6, 1));
}

TEST(Balance, EmptyClassIsNamed) {
  std::vector<std::size_t> labels{0, 0, 2};
  try {
    balance_resample(labels, {"Bulk Carrier", "Container Ship", "Tanker"}, 10, 1, 0);
    FAIL() << "expected ContractError";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("Container Ship"), std::string::npos);
  }
  EXPECT_THROW(balance_resample(labels, {"a", "b", "c"}, 0, 1, 0), ConfigError);
}

TEST(Augment, FlipAndShift) {
  std::vector<float> img(16);
  for (std::size_t i = 0; i < 16; ++i) img[i] = static_cast<float>(i);
  EXPECT_EQ(augment_image(img, 4, EpochEntry{}), img);
  const auto flipped = augment_image(img, 4, EpochEntry{0, 0, true, 0, 0});
  EXPECT_EQ(flipped[0], 3.0f);
  EXPECT_EQ(flipped[7], 4.0f);
  EXPECT_EQ(augment_image(flipped, 4, EpochEntry{0, 0, true, 0, 0}), img);
  const auto shifted = augment_image(img, 4, EpochEntry{0, 0, false, 1, 2});
  EXPECT_EQ(shifted[0], 0.0f);
  EXPECT_EQ(shifted[2 * 4 + 1], img[0]);
  EXPECT_EQ(shifted[3 * 4 + 3], img[1 * 4 + 2]);
}

TEST(Augment, DrawsStayInRange) {
  std::vector<std::size_t> labels{0, 0, 1, 1};
  std::set<int> shifts;
  std::size_t flips = 0, total = 0;
  for (const auto& e : balance_resample(labels, {"a", "b"}, 500, 2, 0, true)) {
    EXPECT_GE(e.dx, -kMaxShift);
    EXPECT_LE(e.dx, kMaxShift);
    EXPECT_GE(e.dy, -kMaxShift);
    EXPECT_LE(e.dy, kMaxShift);
    shifts.insert(e.dx);
    flips += e.flip ? 1 : 0;
    ++total;
  }
  EXPECT_EQ(shifts.size(), 9u);
  EXPECT_GT(flips, total / 3);
  EXPECT_LT(flips, 2 * total / 3);
}
