#include "mz/grid.hpp"

#include <gtest/gtest.h>

#include <sstream>

#include "mz/rng.hpp"

namespace {

mz::PatchRecord patch(std::int64_t x, std::int64_t y, std::vector<float> f) {
  return {x, y, std::move(f)};
}

mz::FeatureGrid random_grid(mz::RngStream& rng, int max_side = 7, int max_d = 5) {
  const int h = 1 + static_cast<int>(rng.below(max_side));
  const int w = 1 + static_cast<int>(rng.below(max_side));
  const int d = 1 + static_cast<int>(rng.below(max_d));
  const float spacing = 224.0f;
  std::vector<mz::PatchRecord> patches;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      bool keep = rng.bernoulli(0.7) || (r == 0 && c == 0);
      if (!keep) continue;
      std::vector<float> f(d);
      for (auto& v : f) v = static_cast<float>(rng.normal());
      patches.push_back(patch(c * 224, r * 224, std::move(f)));
    }
  return mz::build_grid(patches, spacing, "20x");
}

TEST(GridBuild, TwoPatchExample) {
  auto g = mz::build_grid({patch(0, 0, {1.f}), patch(448, 224, {2.f})}, 224.0f);
  EXPECT_EQ(g.height, 2);
  EXPECT_EQ(g.width, 3);
  EXPECT_EQ(g.valid_count(), 2u);
  EXPECT_TRUE(g.valid(0, 0));
  EXPECT_TRUE(g.valid(1, 2));
  EXPECT_FLOAT_EQ(g.feature(1, 2)[0], 2.f);
}

TEST(GridBuild, SinglePatch) {
  auto g = mz::build_grid({patch(100, 100, {3.f, 4.f})}, 224.0f);
  EXPECT_EQ(g.height, 1);
  EXPECT_EQ(g.width, 1);
  EXPECT_FLOAT_EQ(g.origin_x, 100.f);
  EXPECT_FLOAT_EQ(g.origin_y, 100.f);
  EXPECT_TRUE(g.valid(0, 0));
}

// Brute-force placement oracle: place every patch independently with the
// rounding formula and compare cell by cell.
TEST(GridBuild, DenseLatticeMatchesPlacementOracle) {
  const float spacing = 224.0f;
  std::vector<mz::PatchRecord> patches;
  for (int r = 0; r < 10; ++r)
    for (int c = 0; c < 10; ++c)
      patches.push_back(patch(c * 224, r * 224, {static_cast<float>(r * 10 + c)}));
  auto g = mz::build_grid(patches, spacing);
  ASSERT_EQ(g.height, 10);
  ASSERT_EQ(g.width, 10);
  EXPECT_EQ(g.valid_count(), 100u);

  for (const auto& p : patches) {
    int r = static_cast<int>(std::floor((p.y - 0) / spacing + 0.5));
    int c = static_cast<int>(std::floor((p.x - 0) / spacing + 0.5));
    ASSERT_TRUE(g.valid(r, c));
    EXPECT_FLOAT_EQ(g.feature(r, c)[0], p.feature[0]);
  }
}

TEST(GridBuild, CollisionNamesBothCoordinates) {
  try {
    mz::build_grid({patch(0, 0, {1.f}), patch(10, 10, {2.f})}, 224.0f);
    FAIL() << "expected collision";
  } catch (const mz::GridError& e) {
    EXPECT_EQ(e.kind(), mz::GridErrorKind::CellCollision);
    std::string msg = e.what();
    EXPECT_NE(msg.find("(0, 0)"), std::string::npos);
    EXPECT_NE(msg.find("(10, 10)"), std::string::npos);
  }
}

TEST(GridBuild, RejectsInconsistentFeatureLengths) {
  EXPECT_THROW(mz::build_grid({patch(0, 0, {1.f}), patch(224, 0, {1.f, 2.f})}, 224.0f),
               mz::GridError);
}

TEST(GridBuild, RejectsEmptyAndBadSpacing) {
  EXPECT_THROW(mz::build_grid({}, 224.0f), mz::GridError);
  EXPECT_THROW(mz::build_grid({patch(0, 0, {1.f})}, 0.0f), mz::GridError);
}

TEST(GridBuild, PermutationInvariant) {
  mz::RngStream rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<mz::PatchRecord> patches;
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 5; ++c)
        if (rng.bernoulli(0.6) || (r == 0 && c == 0))
          patches.push_back(patch(c * 224, r * 224, {static_cast<float>(rng.normal())}));
    auto a = mz::build_grid(patches, 224.0f);
    rng.shuffle(patches);
    auto b = mz::build_grid(patches, 224.0f);
    EXPECT_EQ(a, b);
  }
}

TEST(GridBuild, InvalidCellsAreZero) {
  mz::RngStream rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    auto g = random_grid(rng);
    double abs_sum = 0.0;
    for (int r = 0; r < g.height; ++r)
      for (int c = 0; c < g.width; ++c)
        if (!g.valid(r, c))
          for (float v : g.feature(r, c)) abs_sum += std::fabs(v);
    EXPECT_EQ(abs_sum, 0.0);
  }
}

// Byte count derived from the format layout: 32 fixed header bytes + 2 tag
// length bytes + tag + ceil(H*W/8) validity bytes + 4*H*W*d feature bytes.
TEST(GridIo, ByteCountMatchesLayout) {
  auto g = mz::build_grid({patch(0, 0, {1.f, 2.f})}, 224.0f);
  std::ostringstream out;
  std::size_t n = mz::write_grid(g, out);
  EXPECT_EQ(n, 32u + 2u + 0u + 1u + 8u);
  EXPECT_EQ(out.str().size(), n);
}

TEST(GridIo, RoundTripIsBitwise) {
  mz::RngStream rng(42);
  for (int trial = 0; trial < 30; ++trial) {
    auto g = random_grid(rng);
    std::stringstream buf;
    mz::write_grid(g, buf);
    auto back = mz::read_grid(buf);
    EXPECT_EQ(g, back);
  }
}

TEST(GridIo, CorruptMagicNamesExpected) {
  auto g = mz::build_grid({patch(0, 0, {1.f})}, 224.0f);
  std::stringstream buf;
  mz::write_grid(g, buf);
  std::string bytes = buf.str();
  bytes[0] = 'X';
  std::istringstream in(bytes);
  try {
    mz::read_grid(in);
    FAIL() << "expected bad magic";
  } catch (const mz::GridError& e) {
    EXPECT_EQ(e.kind(), mz::GridErrorKind::BadMagic);
    EXPECT_NE(std::string(e.what()).find("MZGR"), std::string::npos);
  }
}

TEST(GridIo, BadVersionRejected) {
  auto g = mz::build_grid({patch(0, 0, {1.f})}, 224.0f);
  std::stringstream buf;
  mz::write_grid(g, buf);
  std::string bytes = buf.str();
  bytes[4] = 9;
  std::istringstream in(bytes);
  try {
    mz::read_grid(in);
    FAIL() << "expected bad version";
  } catch (const mz::GridError& e) {
    EXPECT_EQ(e.kind(), mz::GridErrorKind::BadVersion);
  }
}

TEST(GridIo, TruncationReportsExpectedAndActual) {
  mz::RngStream rng(7);
  auto g = random_grid(rng);
  std::stringstream buf;
  std::size_t full = mz::write_grid(g, buf);
  std::string bytes = buf.str().substr(0, full - 3);
  std::istringstream in(bytes);
  try {
    mz::read_grid(in);
    FAIL() << "expected truncation";
  } catch (const mz::GridError& e) {
    EXPECT_EQ(e.kind(), mz::GridErrorKind::Truncated);
    EXPECT_NE(std::string(e.what()).find("expected"), std::string::npos);
  }
}

TEST(GridIo, NonzeroFeatureAtInvalidCellRejected) {
  // 1x2 grid with one valid cell; flip a feature byte of the invalid cell.
  auto g = mz::build_grid({patch(0, 0, {1.f})}, 224.0f);
  g.width = 2;
  g.features = {1.f, 0.f};
  g.validity = {1, 0};
  std::stringstream buf;
  mz::write_grid(g, buf);
  std::string bytes = buf.str();
  bytes[bytes.size() - 1] = 0x40;  // corrupt last float (invalid cell)
  std::istringstream in(bytes);
  try {
    mz::read_grid(in);
    FAIL() << "expected validity/zero mismatch";
  } catch (const mz::GridError& e) {
    EXPECT_EQ(e.kind(), mz::GridErrorKind::ValidityZeroMismatch);
  }
}

}  // namespace
