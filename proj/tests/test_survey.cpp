#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "geossl/manifest_io.hpp"
#include "geossl/spatial_index.hpp"
#include "geossl/survey.hpp"

using namespace geossl;
namespace fs = std::filesystem;

namespace {

GeneratorConfig small_config(std::size_t n = 300) {
  GeneratorConfig c;
  c.n_patches = n;
  c.image_size = 16;
  return c;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("geossl_survey_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::size_t> brute_force(const SurveyManifest& m, std::size_t i, double r) {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < m.size(); ++j) {
    if (j == i) continue;
    const double d = std::hypot(m.patches[i].northing_m - m.patches[j].northing_m,
                                m.patches[i].easting_m - m.patches[j].easting_m);
    if (d < r) out.push_back(j);
  }
  return out;
}

GeoPatch at(std::size_t id, double n, double e) {
  GeoPatch p;
  p.id = id;
  p.northing_m = n;
  p.easting_m = e;
  p.image_ref = "inline:";
  return p;
}

}  // namespace

TEST(Generator, DeterministicForSeed) {
  const auto a = generate_survey(small_config(), 7);
  const auto b = generate_survey(small_config(), 7);
  EXPECT_TRUE(a == b);
  const auto c = generate_survey(small_config(), 8);
  EXPECT_FALSE(a == c);
}

TEST(Generator, ByteIdenticalManifestFiles) {
  GeneratorConfig cfg;
  cfg.image_size = 8;
  const auto d1 = temp_dir("det1"), d2 = temp_dir("det2");
  save_manifest(generate_survey(cfg, 7), d1);
  save_manifest(generate_survey(cfg, 7), d2);
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  EXPECT_EQ(slurp(d1 / "manifest.jsonl"), slurp(d2 / "manifest.jsonl"));
  EXPECT_EQ(slurp(d1 / "images/001999.bin"), slurp(d2 / "images/001999.bin"));
}

TEST(Generator, AdjacentPatchesMostlyShareLabels) {
  GeneratorConfig cfg;  // L = 40 m, interval 2 m, 2000 patches
  cfg.image_size = 8;
  const auto m = generate_survey(cfg, 7);
  std::size_t same = 0, pairs = 0;
  for (std::size_t i = 0; i + 1 < m.size(); ++i) {
    if ((i + 1) % cfg.patches_per_leg == 0) continue;  // leg turn
    ++pairs;
    same += m.patches[i].label == m.patches[i + 1].label;
  }
  EXPECT_GT(static_cast<double>(same) / static_cast<double>(pairs), 0.9);
}

TEST(Generator, LabelCoherenceWithinOneAndAHalfIntervals) {
  // Pooled over three surveys per scale; L = 20 m is ten patch intervals.
  for (double scale : {20.0, 40.0, 80.0}) {
    std::size_t same = 0, pairs = 0;
    for (std::uint64_t seed : {1, 2, 3}) {
      GeneratorConfig cfg = small_config(2000);
      cfg.image_size = 8;
      cfg.habitat_scale_m = scale;
      const auto m = generate_survey(cfg, seed);
      const SpatialIndex index(m, 4.0);
      for (std::size_t i = 0; i < m.size(); ++i)
        for (auto j : index.radius_query(i, 1.5 * cfg.patch_interval_m)) {
          ++pairs;
          same += m.patches[i].label == m.patches[j].label;
        }
    }
    EXPECT_GE(static_cast<double>(same) / static_cast<double>(pairs), 0.9) << "L = " << scale;
  }
}

TEST(Generator, HugeHabitatScaleGivesOneClass) {
  GeneratorConfig cfg = small_config();
  cfg.habitat_scale_m = 1e6;
  const auto m = generate_survey(cfg, 1);
  for (const auto& p : m.patches) EXPECT_EQ(p.label, m.patches.front().label);
}

TEST(Generator, ImagesInUnitRangeWithRequestedShape) {
  const auto m = generate_survey(small_config(50), 2);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const Image& im = m.image(i);
    ASSERT_EQ(im.height, 16u);
    ASSERT_EQ(im.channels, 3u);
    for (float v : im.pixels) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  }
}

TEST(Generator, PerImageModeStillAvailable) {
  GeneratorConfig cfg = small_config(40);
  cfg.footprint_m = 0.0;
  const auto a = generate_survey(cfg, 2);
  EXPECT_EQ(a.size(), 40u);
  EXPECT_TRUE(a == generate_survey(cfg, 2));
}

TEST(Generator, OverlappingFootprintsShareContent) {
  // With heading fixed and no per-image nuisance, two passes over the same
  // ground render nearly the same pixels.
  GeneratorConfig cfg = small_config(4);
  cfg.patches_per_leg = 2;
  cfg.track_spacing_m = 1e-9;
  cfg.patch_interval_m = 2.0;
  cfg.heading_jitter_deg = 0.0;
  cfg.illumination_jitter = 0.0;
  cfg.colour_cast = 0.0;
  cfg.shading = 0.0;
  cfg.observation_noise = 0.0;
  const auto m = generate_survey(cfg, 5);
  // Patch 0 and patch 3 sit at the same spot on opposite headings: a 180 degree rotation.
  const Image& a = m.image(0);
  const Image& b = m.image(3);
  double diff = 0.0;
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) diff += std::abs(a.at(y, x, 0) - b.at(15 - y, 15 - x, 0));
  EXPECT_LT(diff / 256.0, 1e-3);
}

TEST(Generator, RejectsBadConfig) {
  GeneratorConfig c = small_config();
  c.n_classes = 1;
  EXPECT_THROW(generate_survey(c, 0), SurveyError);
  c = small_config();
  c.class_weights = {1.0, -1.0, 1.0};
  EXPECT_THROW(generate_survey(c, 0), SurveyError);
  c = small_config();
  c.anisotropy = 1.5;
  EXPECT_THROW(generate_survey(c, 0), SurveyError);
}

TEST(Generator, ConfigJsonRoundTrip) {
  const GeneratorConfig c = resolve(small_config());
  EXPECT_EQ(nlohmann::json(c).get<GeneratorConfig>(), c);
}

TEST(Manifest, SaveLoadRoundTrip) {
  const auto m = generate_survey(small_config(60), 9);
  const auto dir = temp_dir("roundtrip");
  const auto path = save_manifest(m, dir);
  const auto loaded = load_manifest(path);
  EXPECT_TRUE(loaded == m);
}

TEST(Manifest, MissingEastingNamesRow) {
  const auto dir = temp_dir("missing");
  std::ofstream(dir / "manifest.jsonl") << R"({"type":"header","class_names":["a","b"]})" << '\n'
                                        << R"({"id":0,"northing_m":0,"easting_m":0,"label":0,"image_ref":"inline:"})"
                                        << '\n'
                                        << R"({"id":1,"northing_m":0,"label":1,"image_ref":"inline:"})" << '\n';
  try {
    load_manifest(dir / "manifest.jsonl");
    FAIL() << "expected an error";
  } catch (const SurveyError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("easting_m"), std::string::npos) << msg;
  }
}

TEST(Manifest, EmptyFileHasNoPatches) {
  const auto dir = temp_dir("empty");
  std::ofstream(dir / "manifest.jsonl").close();
  try {
    load_manifest(dir / "manifest.jsonl");
    FAIL() << "expected an error";
  } catch (const SurveyError& e) {
    EXPECT_NE(std::string(e.what()).find("no patches"), std::string::npos) << e.what();
  }
}

TEST(Manifest, MissingBlobIsReported) {
  const auto m = generate_survey(small_config(10), 1);
  const auto dir = temp_dir("blob");
  const auto path = save_manifest(m, dir);
  fs::remove(dir / m.patches[4].image_ref);
  EXPECT_THROW(load_manifest(path), SurveyError);
}

TEST(Manifest, InlineImagesRoundTrip) {
  Image im(4, 4, 3, 0.25f);
  im.at(1, 2, 0) = 0.75f;
  EXPECT_EQ(decode_blob(encode_blob(im)), im);
  const std::string ref = inline_image_ref(im);
  EXPECT_TRUE(ref.starts_with("inline:"));
}

TEST(SpatialIndex, ThreePointsOnALine) {
  const std::vector<GeoPatch> ps{at(0, 0, 0), at(1, 3, 0), at(2, 5, 0)};
  const SpatialIndex index(ps, 1.0);
  EXPECT_EQ(index.radius_query(0, 4.0), (std::vector<std::size_t>{1}));
}

TEST(SpatialIndex, RadiusBelowSpacingIsEmpty) {
  const std::vector<GeoPatch> ps{at(0, 0, 0), at(1, 3, 0), at(2, 5, 0)};
  const SpatialIndex index(ps, 1.0);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(index.radius_query(i, 1.9).empty());
}

TEST(SpatialIndex, ExactDistanceExcluded) {
  const std::vector<GeoPatch> ps{at(0, 0, 0), at(1, 0, 2), at(2, 3, 4)};
  const SpatialIndex index(ps, 1.5);
  EXPECT_TRUE(index.radius_query(0, 2.0).empty());
  EXPECT_EQ(index.radius_query(0, 5.0), (std::vector<std::size_t>{1}));
  EXPECT_EQ(index.radius_query(0, 5.0 + 1e-9), (std::vector<std::size_t>{1, 2}));
}

TEST(SpatialIndex, MatchesBruteForceOnGeneratedSurveys) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto m = generate_survey(small_config(500), seed);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, m.size() - 1);
    std::uniform_real_distribution<double> radius(0.1, 12.0);
    for (double cell : {1.0, 4.0, 20.0}) {
      const SpatialIndex index(m, cell);
      for (int probe = 0; probe < 100; ++probe) {
        const std::size_t i = pick(rng);
        const double r = radius(rng);
        ASSERT_EQ(index.radius_query(i, r), brute_force(m, i, r)) << "i=" << i << " r=" << r;
      }
    }
  }
}

TEST(SpatialIndex, RejectsBadInput) {
  const std::vector<GeoPatch> ps{at(0, 0, 0)};
  EXPECT_THROW(SpatialIndex(ps, 0.0), SurveyError);
  const SpatialIndex index(ps, 1.0);
  EXPECT_THROW(index.radius_query(3, 1.0), SurveyError);
  EXPECT_THROW(index.radius_query(0, -1.0), SurveyError);
}

TEST(Survey, MinSpacingOfTrack) {
  const auto m = generate_survey(small_config(120), 0);
  EXPECT_NEAR(m.min_spacing(), 2.0, 1e-12);
}
