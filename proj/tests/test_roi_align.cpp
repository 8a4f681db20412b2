#include <gtest/gtest.h>

#include <random>

#include "dsfpn/roi_align.hpp"
#include "support/grad_check.hpp"
#include "support/oracles.hpp"

using namespace dsfpn;
using dsfpn::testing::GradChecker;
using dsfpn::testing::random_tensor;

namespace {

Box random_roi(std::mt19937_64& rng, double extent) {
  std::uniform_real_distribution<double> pos(-2, extent), size(0.3, extent / 1.5);
  const double x = pos(rng), y = pos(rng);
  return {x, y, x + size(rng), y + size(rng)};
}

std::vector<double> values(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(RoiAlign, ConstantMapGivesConstant) {
  auto f = Tensor<double>::full({1, 2, 6, 6}, 3.25);
  std::mt19937_64 rng(0);
  for (int i = 0; i < 20; ++i) {
    const auto out = roi_align(f, random_roi(rng, 24), 4, RoiConfig{3, 2, 2});
    for (double v : out.data()) EXPECT_NEAR(v, 3.25, 1e-12);
  }
}

TEST(RoiAlign, CellAlignedBoxReadsThatCell) {
  std::mt19937_64 rng(1);
  auto f = random_tensor({1, 1, 5, 5}, rng);
  // Cell (2, 3) at stride 4 covers [12, 16) × [8, 12).
  auto out = roi_align(f, Box{12, 8, 16, 12}, 4, RoiConfig{1, 1, 1});
  EXPECT_DOUBLE_EQ(out.item(), f.data()[2 * 5 + 3]);
}

TEST(RoiAlign, DegenerateBoxRejected) {
  auto f = Tensor<double>::zeros({1, 1, 4, 4});
  EXPECT_THROW(roi_align(f, Box{1, 1, 1, 3}, 2, RoiConfig{}), std::invalid_argument);
}

TEST(RoiAlign, MatchesDenseBilinearOracle) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 100; ++i) {
    auto f = random_tensor({1, 2, 8, 8}, rng);
    const Box b = random_roi(rng, 32);
    const RoiConfig cfg{2 + std::size_t(i % 3), 2 + std::size_t(i % 2), 1 + std::size_t(i % 3)};
    const auto got = values(roi_align(f, b, 4, cfg));
    const auto want = oracle::roi_align(values(f), 2, 8, 8, b, 4, cfg.output_h, cfg.output_w, cfg.sampling_ratio);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t k = 0; k < got.size(); ++k) EXPECT_NEAR(got[k], want[k], 1e-6);
  }
}

TEST(RoiAlign, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    auto f0 = random_tensor({2, 3, 6, 6}, rng), f1 = random_tensor({2, 3, 3, 3}, rng);
    std::vector<RoiRef> rois;
    for (int r = 0; r < 4; ++r) rois.push_back({std::size_t(r % 2), std::size_t(r / 2), random_roi(rng, 12)});
    const std::size_t strides[] = {2, 4};
    auto errs = GradChecker().run({{"level0", f0}, {"level1", f1}}, [&] {
      return ops::mean(ops::sigmoid(roi_align_levels<double>({f0, f1}, rois, strides, RoiConfig{2, 3, 2})));
    });
    EXPECT_LT(GradChecker::worst(errs), 1e-6) << "seed " << seed;
  }
}

TEST(RoiAlign, LinearInFeatures) {
  std::mt19937_64 rng(4);
  auto a = random_tensor({1, 2, 6, 6}, rng), b = random_tensor({1, 2, 6, 6}, rng);
  auto mix = ops::add(ops::scale(a, 2.0), ops::scale(b, -0.5));
  const Box box{3.3, 1.7, 17.2, 20.5};
  const auto ra = values(roi_align(a, box, 4, RoiConfig{})), rb = values(roi_align(b, box, 4, RoiConfig{}));
  const auto rm = values(roi_align(mix, box, 4, RoiConfig{}));
  for (std::size_t i = 0; i < rm.size(); ++i) EXPECT_NEAR(rm[i], 2.0 * ra[i] - 0.5 * rb[i], 1e-12);
}

TEST(RoiAlign, ShiftingBoxAndContentByOneStrideIsInvariant) {
  std::mt19937_64 rng(6);
  auto f = random_tensor({1, 1, 10, 10}, rng);
  std::vector<double> shifted(100, 0.0);
  for (std::size_t y = 0; y < 10; ++y) {
    for (std::size_t x = 1; x < 10; ++x) shifted[y * 10 + x] = f.data()[y * 10 + x - 1];
  }
  auto g = Tensor<double>::from_data({1, 1, 10, 10}, shifted);
  const Box box{8.5, 9, 20, 22};
  const auto a = values(roi_align(f, box, 4, RoiConfig{}));
  const auto b = values(roi_align(g, Box{12.5, 9, 24, 22}, 4, RoiConfig{}));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(RoiAlign, LevelsAndImagesAreRespected) {
  std::mt19937_64 rng(8);
  auto f0 = random_tensor({2, 2, 8, 8}, rng), f1 = random_tensor({2, 2, 4, 4}, rng);
  const Box box{2, 3, 13, 11};
  const std::size_t strides[] = {2, 4};
  const std::vector<RoiRef> rois{{1, 1, box}};
  const auto batched = values(roi_align_levels<double>({f0, f1}, rois, strides, RoiConfig{}));
  auto image1 = Tensor<double>::from_data({1, 2, 4, 4}, std::vector<double>(f1.data().begin() + 32, f1.data().end()));
  EXPECT_EQ(batched, values(roi_align(image1, box, 4, RoiConfig{})));
  const std::vector<RoiRef> bad{{2, 0, box}};
  EXPECT_THROW(roi_align_levels<double>({f0, f1}, bad, strides, RoiConfig{}), std::out_of_range);
}
