#include <cmath>
#include <map>

#include <gtest/gtest.h>

#include "geossl/spatial_index.hpp"
#include "geossl/views.hpp"

using namespace geossl;

namespace {

GeoPatch at(std::size_t id, double n, double e) {
  GeoPatch p;
  p.id = id;
  p.northing_m = n;
  p.easting_m = e;
  return p;
}

// Patch 0 has exactly two neighbours within 1.5 m: 4 and 9.
std::vector<GeoPatch> star() {
  std::vector<GeoPatch> ps;
  for (std::size_t id = 0; id < 10; ++id) ps.push_back(at(id, 100.0 * static_cast<double>(id), 0.0));
  ps[0] = at(0, 0.0, 0.0);
  ps[4] = at(4, 1.0, 0.0);
  ps[9] = at(9, 0.0, 1.0);
  return ps;
}

Image gradient_image(std::size_t size, float offset = 0.0f) {
  Image im(size, size, 3);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        im.at(y, x, c) = std::fmod(offset + 0.01f * static_cast<float>(y * size + x) + 0.1f * static_cast<float>(c), 1.0f);
  return im;
}

}  // namespace

TEST(SelectPartner, StandardAlwaysSelf) {
  const auto ps = star();
  const SpatialIndex index(ps, 1.0);
  SamplerConfig cfg;
  Rng rng = make_rng(1);
  for (std::size_t i = 0; i < ps.size(); ++i) EXPECT_EQ(select_partner(i, cfg, index, rng), i);
}

TEST(SelectPartner, GeoWithoutNeighbourFallsBack) {
  const auto ps = star();
  const SpatialIndex index(ps, 1.0);
  SamplerConfig cfg{SamplerMode::kGeo, 1.5};
  Rng rng = make_rng(1);
  EXPECT_EQ(select_partner(3, cfg, index, rng), 3u);
}

TEST(SelectPartner, GeoUniformOverNeighbours) {
  const auto ps = star();
  const SpatialIndex index(ps, 1.0);
  SamplerConfig cfg{SamplerMode::kGeo, 1.5};
  Rng rng = make_rng(2024);
  std::map<std::size_t, int> counts;
  const int draws = 10000;
  for (int k = 0; k < draws; ++k) ++counts[select_partner(0, cfg, index, rng)];
  ASSERT_EQ(counts.size(), 2u);
  const double f4 = counts[4] / static_cast<double>(draws);
  const double f9 = counts[9] / static_cast<double>(draws);
  EXPECT_NEAR(f4, 0.5, 0.05);
  EXPECT_NEAR(f9, 0.5, 0.05);
  const double expected = draws / 2.0;
  const double chi2 = (counts[4] - expected) * (counts[4] - expected) / expected +
                      (counts[9] - expected) * (counts[9] - expected) / expected;
  EXPECT_LT(chi2, 6.63);  // df = 1, p = 0.01
}

TEST(SelectPartner, GeoPartnersWithinRadius) {
  std::vector<GeoPatch> ps;
  Rng place = make_rng(5);
  for (std::size_t id = 0; id < 400; ++id) ps.push_back(at(id, uniform(place, 0, 50), uniform(place, 0, 50)));
  const SpatialIndex index(ps, 3.0);
  SamplerConfig cfg{SamplerMode::kGeo, 3.0};
  Rng rng = make_rng(6);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const std::size_t j = select_partner(i, cfg, index, rng);
    if (j == i) continue;
    EXPECT_LT(std::hypot(ps[i].northing_m - ps[j].northing_m, ps[i].easting_m - ps[j].easting_m), 3.0);
  }
}

TEST(SelectPartner, GeoNeedsRadius) {
  const auto ps = star();
  const SpatialIndex index(ps, 1.0);
  SamplerConfig cfg{SamplerMode::kGeo, std::nullopt};
  Rng rng = make_rng(1);
  EXPECT_THROW(select_partner(0, cfg, index, rng), ViewError);
  EXPECT_THROW(parse_sampler_mode("nearby"), ViewError);
}

TEST(SelectPartner, TinyRadiusMatchesStandardStream) {
  std::vector<GeoPatch> ps;
  for (std::size_t id = 0; id < 50; ++id) ps.push_back(at(id, 0.0, 2.0 * static_cast<double>(id)));
  const SpatialIndex index(ps, 1.0);
  const Image im = gradient_image(24);
  AugmentParams ap;
  ap.global_size = 16;
  ap.local_size = 6;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    Rng pa = make_rng(9, {i}), pb = make_rng(9, {i});
    const std::size_t ja = select_partner(i, SamplerConfig{SamplerMode::kStandard, std::nullopt}, index, pa);
    const std::size_t jb = select_partner(i, SamplerConfig{SamplerMode::kGeo, 1.0}, index, pb);
    ASSERT_EQ(ja, jb);
    Rng aa = make_rng(10, {i}), ab = make_rng(10, {i});
    const ViewSet va = make_pair(i, ja, im, im, ap, aa);
    const ViewSet vb = make_pair(i, jb, im, im, ap, ab);
    EXPECT_EQ(va.globals, vb.globals);
  }
}

TEST(Augment, IdentityParamsAreIdentity) {
  const Image im = gradient_image(20);
  Rng rng = make_rng(3);
  EXPECT_EQ(augment(im, AugmentParams::identity(20), rng), im);
}

TEST(Augment, DeterministicForSeed) {
  const Image im = gradient_image(32);
  AugmentParams ap;
  ap.global_size = 24;
  ap.local_size = 10;
  Rng a = make_rng(4), b = make_rng(4);
  EXPECT_EQ(augment(im, ap, a), augment(im, ap, b));
}

TEST(Augment, OutputShapeAndRange) {
  const Image im = gradient_image(40);
  AugmentParams ap;
  ap.global_size = 32;
  ap.local_size = 14;
  Rng rng = make_rng(8);
  for (int k = 0; k < 20; ++k) {
    const Image out = augment(im, ap, rng);
    ASSERT_EQ(out.height, 32u);
    ASSERT_EQ(out.width, 32u);
    for (float v : out.pixels) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  }
}

TEST(Augment, FlipsAreExact) {
  AugmentParams ap = AugmentParams::identity(8);
  ap.hflip_prob = 1.0;
  const Image im = gradient_image(8);
  Rng rng = make_rng(1);
  const Image out = augment(im, ap, rng);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) EXPECT_EQ(out.at(y, x, 1), im.at(y, 7 - x, 1));
}

TEST(Augment, RejectsBadParams) {
  AugmentParams ap;
  ap.global_size = 10;
  ap.local_size = 8;
  EXPECT_THROW(ap.validate(), ViewError);
  ap = AugmentParams{};
  ap.global_scale = {0.9, 0.2};
  EXPECT_THROW(ap.validate(), ViewError);
}

TEST(MakePair, IdentityOnSameImageGivesEqualViews) {
  const Image im = gradient_image(16);
  Rng rng = make_rng(2);
  const ViewSet v = make_pair(3, 3, im, im, AugmentParams::identity(16), rng);
  ASSERT_EQ(v.globals.size(), 2u);
  EXPECT_EQ(v.globals[0], v.globals[1]);
}

TEST(MakePair, ProvenanceRecorded) {
  const Image a = gradient_image(16), b = gradient_image(16, 0.3f);
  Rng rng = make_rng(2);
  const ViewSet v = make_pair(3, 8, a, b, AugmentParams::identity(16), rng);
  EXPECT_EQ(v.anchor, 3u);
  EXPECT_EQ(v.partner, 8u);
  EXPECT_EQ(v.global_source, (std::vector<std::size_t>{3, 8}));
  EXPECT_EQ(v.globals[0], a);
  EXPECT_EQ(v.globals[1], b);
}

TEST(MakePair, CropLargerThanImageFails) {
  const Image im = gradient_image(12);
  Rng rng = make_rng(2);
  EXPECT_THROW(make_pair(0, 0, im, im, AugmentParams::identity(16), rng), ViewError);
}

TEST(MakeMulticrop, TwoGlobalsAndAnchoredLocals) {
  const Image a = gradient_image(40), b = gradient_image(40, 0.5f);
  AugmentParams ap;
  ap.global_size = 32;
  ap.local_size = 14;
  ap.n_local = 4;
  Rng rng = make_rng(12);
  const ViewSet v = make_multicrop(1, 7, a, b, ap, rng);
  EXPECT_EQ(v.globals.size(), 2u);
  EXPECT_EQ(v.locals.size(), 4u);
  EXPECT_EQ(v.global_source, (std::vector<std::size_t>{1, 7}));
  EXPECT_EQ(v.local_source, (std::vector<std::size_t>(4, 1)));
  for (const auto& l : v.locals) EXPECT_EQ(l.height, 14u);
  // Globals carry at least five times the pixels of locals.
  EXPECT_GE(32 * 32, 5 * 14 * 14);
}

TEST(MakeMulticrop, SameAnchorReducesToBaseMulticrop) {
  const Image a = gradient_image(40);
  AugmentParams ap;
  ap.global_size = 32;
  ap.local_size = 14;
  Rng rng = make_rng(12);
  const ViewSet v = make_multicrop(5, 5, a, a, ap, rng);
  EXPECT_EQ(v.global_source, (std::vector<std::size_t>{5, 5}));
  for (auto s : v.local_source) EXPECT_EQ(s, 5u);
}

TEST(CenterCrop, TakesMiddleWindow) {
  const Image im = gradient_image(10);
  const Image c = center_crop(im, 6);
  for (std::size_t y = 0; y < 6; ++y)
    for (std::size_t x = 0; x < 6; ++x) EXPECT_EQ(c.at(y, x, 2), im.at(y + 2, x + 2, 2));
}
