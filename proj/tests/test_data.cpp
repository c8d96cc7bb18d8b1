#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "dhkd/data.hpp"
#include "test_util.hpp"

using namespace dhkd;
using namespace dhkd::data;

TEST(Synthetic, SizesAndLabels) {
  const auto ds = gen_gaussian_mixture({3, 5, 100, 3.0, 0});
  EXPECT_EQ(ds.size(), 300u);
  EXPECT_EQ(ds.dim(), 5u);
  EXPECT_EQ(ds.classes, 3u);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(std::count(ds.y.begin(), ds.y.end(), c), 100);
}

TEST(Synthetic, ClassMeansSitOnScaledEtf) {
  const SyntheticSpec spec{4, 8, 500, 4.0, 7};
  const auto ds = gen_gaussian_mixture(spec);
  Rng rng(spec.seed);
  const auto f = collapse::make_etf(spec.dim, spec.classes, rng);
  const double bound = 4.0 / std::sqrt(500.0);
  for (std::size_t c = 0; c < 4; ++c) {
    std::vector<double> mean(8, 0.0);
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.y[i] == c)
        for (std::size_t j = 0; j < 8; ++j) mean[j] += ds.x(i, j) / 500.0;
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(mean[j], 4.0 * f.M(j, c), bound);
  }
}

TEST(Synthetic, ZeroSeparationIsPureNoise) {
  const auto ds = gen_gaussian_mixture({4, 6, 400, 0.0, 1});
  double s = 0.0, ss = 0.0;
  for (double v : ds.x.flat()) {
    s += v;
    ss += v * v;
  }
  const double n = static_cast<double>(ds.x.size());
  EXPECT_NEAR(s / n, 0.0, 4.0 / std::sqrt(n));
  EXPECT_NEAR(ss / n, 1.0, 0.05);
}

TEST(Synthetic, DeterministicInSeed) {
  const SyntheticSpec spec{3, 4, 10, 2.0, 9};
  EXPECT_TRUE(dhkd::testing::bitwise_equal(gen_gaussian_mixture(spec).x, gen_gaussian_mixture(spec).x));
  auto other = spec;
  other.seed = 10;
  EXPECT_FALSE(dhkd::testing::bitwise_equal(gen_gaussian_mixture(spec).x, gen_gaussian_mixture(other).x));
}

TEST(Synthetic, RejectsBadSpecs) {
  EXPECT_THROW(gen_gaussian_mixture({1, 4, 10, 1.0, 0}), DataError);
  EXPECT_THROW(gen_gaussian_mixture({5, 4, 10, 1.0, 0}), DataError);
  EXPECT_THROW(gen_gaussian_mixture({3, 4, 0, 1.0, 0}), DataError);
  EXPECT_THROW(gen_gaussian_mixture({3, 4, 10, -1.0, 0}), DataError);
  EXPECT_THROW(gen_gaussian_mixture({3, 4, 10, NAN, 0}), DataError);
}

namespace {

const std::vector<std::uint8_t> kImages = {0, 0, 0x08, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 255, 255, 0};
const std::vector<std::uint8_t> kLabels = {0, 0, 0x08, 1, 0, 0, 0, 2, 1, 0};

}  // namespace

TEST(Idx, ByteFixtureDecodes) {
  const auto ds = decode_idx(kImages, kLabels);
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.dim(), 2u);
  EXPECT_EQ(ds.x, (Matrix{{0.0, 1.0}, {1.0, 0.0}}));
  EXPECT_EQ(ds.y, (std::vector<std::size_t>{1, 0}));
  EXPECT_EQ(ds.classes, 2u);
  EXPECT_EQ(decode_idx(kImages, kLabels, 5).classes, 5u);
}

TEST(Idx, ByteEncodingMatchesFixture) {
  const auto ds = decode_idx(kImages, kLabels);
  auto expected = kImages;
  expected[3] = 2;  // encoder writes N x D
  expected.erase(expected.begin() + 8, expected.begin() + 12);
  EXPECT_EQ(encode_idx_images(ds.x, true), expected);
  EXPECT_EQ(encode_idx_labels(ds.y), kLabels);
}

TEST(Idx, RejectsMalformedInput) {
  auto three_labels = kLabels;
  three_labels[7] = 3;
  three_labels.push_back(0);
  EXPECT_THROW(decode_idx(kImages, three_labels), DataError);
  auto bad_magic = kImages;
  bad_magic[0] = 1;
  EXPECT_THROW(decode_idx(bad_magic, kLabels), DataError);
  auto bad_type = kImages;
  bad_type[2] = 0x0B;
  EXPECT_THROW(decode_idx(bad_type, kLabels), DataError);
  auto truncated = kImages;
  truncated.pop_back();
  EXPECT_THROW(decode_idx(truncated, kLabels), DataError);
  auto trailing = kImages;
  trailing.push_back(7);
  EXPECT_THROW(decode_idx(trailing, kLabels), DataError);
  EXPECT_THROW(decode_idx({0, 0, 8}, kLabels), DataError);
  auto huge = kImages;
  for (std::size_t i = 12; i < 16; ++i) huge[i] = 0xFF;
  EXPECT_THROW(decode_idx(huge, kLabels), DataError);
  EXPECT_THROW(decode_idx(kImages, kLabels, 1), DataError);
}

TEST(Idx, DoubleRoundTripIsBitExact) {
  const auto ds = gen_gaussian_mixture({3, 4, 7, 2.5, 3});
  const auto dir = dhkd::testing::scratch_dir();
  save_idx(ds, (dir / "x.idx").string(), (dir / "y.idx").string());
  const auto back = load_idx((dir / "x.idx").string(), (dir / "y.idx").string(), 3);
  EXPECT_TRUE(dhkd::testing::bitwise_equal(back.x, ds.x));
  EXPECT_EQ(back.y, ds.y);
  EXPECT_EQ(dhkd::testing::slurp(dir / "x.idx")[2], kIdxDouble);
}

TEST(Idx, MissingFileThrows) {
  EXPECT_THROW(load_idx("/nonexistent/a.idx", "/nonexistent/b.idx"), DataError);
}

TEST(Split, StratifiedAndDisjoint) {
  const auto ds = gen_gaussian_mixture({3, 4, 10, 1.0, 0});
  const auto s = split(ds, 0.5, 4);
  EXPECT_EQ(s.train.size(), 15u);
  EXPECT_EQ(s.test.size(), 15u);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(std::count(s.train.y.begin(), s.train.y.end(), c), 5);
    EXPECT_EQ(std::count(s.test.y.begin(), s.test.y.end(), c), 5);
  }
  // Rows of train and test together are exactly the rows of the source.
  std::vector<std::vector<double>> all, parts;
  for (std::size_t i = 0; i < ds.size(); ++i) all.emplace_back(ds.x.row(i).begin(), ds.x.row(i).end());
  for (const auto* d : {&s.train, &s.test})
    for (std::size_t i = 0; i < d->size(); ++i) parts.emplace_back(d->x.row(i).begin(), d->x.row(i).end());
  std::sort(all.begin(), all.end());
  std::sort(parts.begin(), parts.end());
  EXPECT_EQ(all, parts);
}

TEST(Split, DeterministicInSeed) {
  const auto ds = gen_gaussian_mixture({3, 4, 10, 1.0, 0});
  EXPECT_EQ(split(ds, 0.6, 1).train.x, split(ds, 0.6, 1).train.x);
  EXPECT_NE(split(ds, 0.6, 1).train.x, split(ds, 0.6, 2).train.x);
}

TEST(Split, RejectsEmptySide) {
  const auto ds = gen_gaussian_mixture({3, 4, 2, 1.0, 0});
  EXPECT_THROW(split(ds, 0.1, 0), DataError);
  EXPECT_THROW(split(ds, 1.0, 0), DataError);
}

TEST(Batches, CoverEverySampleOnce) {
  Rng rng(5);
  const auto b = batches(10, 4, rng);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].size(), 4u);
  EXPECT_EQ(b[2].size(), 2u);
  std::vector<std::size_t> seen;
  for (const auto& x : b) seen.insert(seen.end(), x.begin(), x.end());
  std::sort(seen.begin(), seen.end());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(seen[i], i);
  EXPECT_THROW(batches(10, 0, rng), DataError);
}

TEST(Batches, EpochOrderDependsOnSeedAndEpoch) {
  EXPECT_EQ(epoch_batches(50, 8, 3, 1), epoch_batches(50, 8, 3, 1));
  EXPECT_NE(epoch_batches(50, 8, 3, 1), epoch_batches(50, 8, 3, 2));
  EXPECT_NE(epoch_batches(50, 8, 3, 1), epoch_batches(50, 8, 4, 1));
}
