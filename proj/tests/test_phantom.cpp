#include "anatembed/phantom.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "anatembed/phantom_io.hpp"

using namespace anatembed;
using phantom::CanonicalLayout;
using phantom::Phantom;

namespace {

double affine_px(double u, int64_t size) {
  return phantom::kMargin * (double)(size - 1) +
         u * (1.0 - 2.0 * phantom::kMargin) * (double)(size - 1);
}

}  // namespace

TEST(Phantom, DeterministicPerSeed) {
  Phantom a = phantom::generate(7, 2, {64, 64}, 0.5);
  Phantom b = phantom::generate(7, 2, {64, 64}, 0.5);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.coord_field, b.coord_field);
  EXPECT_EQ(a.body_mask, b.body_mask);
  ASSERT_EQ(a.landmarks.size(), b.landmarks.size());
  for (size_t i = 0; i < a.landmarks.size(); ++i)
    EXPECT_EQ(a.landmarks[i].position_px, b.landmarks[i].position_px);

  Phantom c = phantom::generate(8, 2, {64, 64}, 0.5);
  EXPECT_NE(a.image, c.image);
  bool any_moved = false;
  for (size_t i = 0; i < a.landmarks.size(); ++i)
    any_moved |= a.landmarks[i].position_px != c.landmarks[i].position_px;
  EXPECT_TRUE(any_moved);
}

TEST(Phantom, ZeroVariationIsExactForAllSeeds) {
  CanonicalLayout layout = CanonicalLayout::default_layout(2);
  for (uint64_t seed : {0ull, 3ull, 91ull}) {
    Phantom ph = phantom::generate(seed, 2, {96, 64}, 0.0, layout);
    for (size_t i = 0; i < ph.landmarks.size(); ++i) {
      const auto& def = layout.landmark_defs[i].point;
      EXPECT_NEAR(ph.landmarks[i].position_px[0], affine_px(def[0], 96), 1e-9);
      EXPECT_NEAR(ph.landmarks[i].position_px[1], affine_px(def[1], 64), 1e-9);
    }
    // Coordinate field must be the exact affine inverse.
    for (int64_t y = 0; y < 96; y += 17)
      for (int64_t x = 0; x < 64; x += 13) {
        double uy = ph.coord_field[(size_t)(y * 64 + x)];
        double ux = ph.coord_field[(size_t)(96 * 64 + y * 64 + x)];
        EXPECT_NEAR(affine_px(uy, 96), (double)y, 1e-4);
        EXPECT_NEAR(affine_px(ux, 64), (double)x, 1e-4);
      }
  }
}

TEST(Phantom, LandmarkDisplacementBoundedOver50Seeds) {
  CanonicalLayout layout = CanonicalLayout::default_layout(2);
  const Shape size = {64, 64};
  const double v = 1.0;
  for (uint64_t seed = 0; seed < 50; ++seed) {
    Phantom ph = phantom::generate(seed, 2, size, v, layout);
    for (size_t i = 0; i < ph.landmarks.size(); ++i) {
      for (int a = 0; a < 2; ++a) {
        double canon = affine_px(layout.landmark_defs[i].point[(size_t)a],
                                 size[(size_t)a]);
        double disp = std::abs(ph.landmarks[i].position_px[(size_t)a] - canon);
        EXPECT_LE(disp, phantom::kDispCap * v * (double)size[(size_t)a] + 1e-9)
            << "seed " << seed << " landmark " << ph.landmarks[i].name;
      }
    }
  }
}

TEST(Phantom, CoordFieldInvertsLandmarks) {
  // coord_interp(landmark_px) must recover the canonical definition.
  CanonicalLayout layout = CanonicalLayout::default_layout(2);
  for (uint64_t seed : {1ull, 5ull}) {
    Phantom ph = phantom::generate(seed, 2, {128, 128}, 0.8, layout);
    for (size_t i = 0; i < ph.landmarks.size(); ++i) {
      VecD u = ph.coord_interp(ph.landmarks[i].position_px);
      for (int a = 0; a < 2; ++a)
        EXPECT_NEAR(u[(size_t)a], layout.landmark_defs[i].point[(size_t)a], 2e-4)
            << ph.landmarks[i].name;
    }
  }
}

TEST(Phantom, CoordFieldJacobianPositive) {
  Phantom ph = phantom::generate(3, 2, {96, 96}, 1.0);
  int checked = 0;
  for (int64_t y = 2; y < 94; y += 5)
    for (int64_t x = 2; x < 94; x += 5) {
      if (!ph.body_mask[(size_t)(y * 96 + x)]) continue;
      ++checked;
      double j[2][2];
      int64_t n = 96 * 96;
      for (int a = 0; a < 2; ++a) {
        const float* plane = ph.coord_field.data() + a * n;
        j[a][0] = 0.5 * ((double)plane[(y + 1) * 96 + x] - plane[(y - 1) * 96 + x]);
        j[a][1] = 0.5 * ((double)plane[y * 96 + x + 1] - plane[y * 96 + x - 1]);
      }
      double det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
      EXPECT_GT(det, 0.0) << "at (" << y << "," << x << ")";
    }
  EXPECT_GT(checked, 100);
}

TEST(Phantom, BackgroundZeroAndRangeClamped) {
  Phantom ph = phantom::generate(11, 2, {96, 96}, 0.7);
  int64_t n_body = 0;
  for (int64_t f = 0; f < ph.npx(); ++f) {
    if (!ph.body_mask[(size_t)f]) {
      EXPECT_EQ(ph.image[(size_t)f], 0.0f);
    } else {
      ++n_body;
    }
    EXPECT_GE(ph.image[(size_t)f], 0.0f);
    EXPECT_LE(ph.image[(size_t)f], 1.0f);
  }
  // Torso occupies a large fraction of the frame.
  EXPECT_GT(n_body, ph.npx() / 4);
  EXPECT_LT(n_body, ph.npx());
  EXPECT_EQ(ph.body_mask[0], 0);  // corner is background
}

TEST(Phantom, LandmarksLieOnBody) {
  for (int dim : {2, 3}) {
    Shape size = dim == 2 ? Shape{96, 96} : Shape{48, 48, 48};
    Phantom ph = phantom::generate(21, dim, size, 0.6);
    for (const auto& lm : ph.landmarks)
      EXPECT_TRUE(ph.body_at_nearest(lm.position_px)) << lm.name;
  }
}

TEST(Phantom, ThreeDimensionalGeneration) {
  Phantom ph = phantom::generate(2, 3, {32, 48, 48}, 0.5);
  EXPECT_EQ(ph.dim, 3);
  EXPECT_EQ((int64_t)ph.image.size(), 32 * 48 * 48);
  EXPECT_EQ((int64_t)ph.coord_field.size(), 3 * 32 * 48 * 48);
  EXPECT_EQ(ph.landmarks.size(), 12u);
  EXPECT_EQ(ph.spacing, (VecD{1.0, 1.0, 1.0}));
  // left and right structures are not mirror images (asymmetric layout)
  int64_t n = ph.npx();
  double asym = 0.0;
  for (int64_t z = 0; z < 32; z += 4)
    for (int64_t y = 0; y < 48; y += 4)
      for (int64_t x = 0; x < 24; x += 2) {
        int64_t l = (z * 48 + y) * 48 + x;
        int64_t r = (z * 48 + y) * 48 + (47 - x);
        asym += std::abs((double)ph.image[(size_t)l] - ph.image[(size_t)r]);
      }
  EXPECT_GT(asym / (double)n, 0.0);
}

TEST(Phantom, ValidatesArguments) {
  EXPECT_THROW(phantom::generate(0, 4, {32, 32}, 0.5), Error);
  EXPECT_THROW(phantom::generate(0, 2, {32}, 0.5), Error);
  EXPECT_THROW(phantom::generate(0, 2, {8, 32}, 0.5), Error);
  EXPECT_THROW(phantom::generate(0, 2, {32, 32}, 1.5), Error);
  EXPECT_THROW(phantom::generate(0, 2, {32, 32}, -0.1), Error);
}

TEST(Phantom, LayoutHashDistinguishesLayouts) {
  CanonicalLayout a = CanonicalLayout::default_layout(2);
  CanonicalLayout b = a;
  EXPECT_EQ(a.hash(), b.hash());
  b.primitives[0].intensity = 0.31;
  EXPECT_NE(a.hash(), b.hash());
  CanonicalLayout c = a;
  c.landmark_defs[0].name = "other";
  EXPECT_NE(a.hash(), c.hash());
}

TEST(PhantomIo, SaveLoadRoundTrip) {
  auto dir = (std::filesystem::temp_directory_path() / "anatembed_ph_test").string();
  std::filesystem::remove_all(dir);
  Phantom ph = phantom::generate(13, 2, {48, 64}, 0.4);
  phantom::save_phantom(dir + "/phantom_0000", ph);
  Phantom lo = phantom::load_phantom(dir + "/phantom_0000");
  EXPECT_EQ(lo.dim, ph.dim);
  EXPECT_EQ(lo.size, ph.size);
  EXPECT_EQ(lo.seed, ph.seed);
  EXPECT_EQ(lo.spacing, ph.spacing);
  EXPECT_DOUBLE_EQ(lo.variation, ph.variation);
  EXPECT_EQ(lo.layout_hash, ph.layout_hash);
  EXPECT_EQ(lo.image, ph.image);
  EXPECT_EQ(lo.coord_field, ph.coord_field);
  EXPECT_EQ(lo.body_mask, ph.body_mask);
  ASSERT_EQ(lo.landmarks.size(), ph.landmarks.size());
  for (size_t i = 0; i < ph.landmarks.size(); ++i) {
    EXPECT_EQ(lo.landmarks[i].name, ph.landmarks[i].name);
    EXPECT_EQ(lo.landmarks[i].position_px, ph.landmarks[i].position_px);
  }

  phantom::save_phantom(dir + "/phantom_0001", phantom::generate(14, 2, {48, 64}, 0.4));
  auto all = phantom::load_dataset(dir);
  EXPECT_EQ(all.size(), 2u);
  EXPECT_EQ(all[0].seed, 13u);
  EXPECT_EQ(all[1].seed, 14u);
  std::filesystem::remove_all(dir);
}

TEST(PhantomIo, LoadRejectsGarbage) {
  auto dir = (std::filesystem::temp_directory_path() / "anatembed_ph_bad").string();
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir + "/phantom_0000");
  io::write_text_atomic(dir + "/phantom_0000/meta.json", "{not json");
  EXPECT_THROW(phantom::load_phantom(dir + "/phantom_0000"), Error);
  EXPECT_THROW(phantom::load_dataset(dir + "/missing"), Error);
  std::filesystem::remove_all(dir);
}
