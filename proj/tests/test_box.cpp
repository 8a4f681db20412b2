#include <gtest/gtest.h>

#include <random>

#include "dsfpn/box.hpp"
#include "support/oracles.hpp"

using namespace dsfpn;

namespace {

Box random_box(std::mt19937_64& rng, double extent = 40.0) {
  std::uniform_real_distribution<double> pos(0, extent), size(0.5, extent / 2);
  const double x = pos(rng), y = pos(rng);
  return {x, y, x + size(rng), y + size(rng)};
}

Box grid_box(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pos(0, 30), size(1, 16);
  const double x = pos(rng) * 0.5, y = pos(rng) * 0.5;
  return {x, y, x + size(rng) * 0.5, y + size(rng) * 0.5};
}

}  // namespace

TEST(Iou, Examples) {
  const Box a{0, 0, 2, 2};
  EXPECT_EQ(iou(a, a), 1.0);
  EXPECT_EQ(iou(a, Box{5, 5, 6, 6}), 0.0);
  EXPECT_NEAR(iou(a, Box{1, 1, 3, 3}), 1.0 / 7.0, 1e-15);
  EXPECT_EQ(iou(Box{1, 1, 1, 1}, Box{1, 1, 1, 1}), 0.0);
}

TEST(Iou, SymmetricAndMatchesCellCounting) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 500; ++i) {
    const Box a = grid_box(rng), b = grid_box(rng);
    EXPECT_EQ(iou(a, b), iou(b, a));
    EXPECT_NEAR(iou(a, b), oracle::grid_iou(a, b, 0.5), 1e-12);
    EXPECT_NEAR(iou(a, a), 1.0, 1e-15);
  }
}

TEST(Nms, Examples) {
  const std::vector<Box> one{{0, 0, 1, 1}};
  EXPECT_EQ(nms(one, std::vector<double>{0.3}, 0.5), std::vector<std::size_t>{0});
  EXPECT_TRUE(nms({}, {}, 0.5).empty());
  // IoU(A, B) = 0.8
  const std::vector<Box> ab{{0, 0, 10, 10}, {0, 0, 10, 8}};
  EXPECT_NEAR(iou(ab[0], ab[1]), 0.8, 1e-12);
  EXPECT_EQ(nms(ab, std::vector<double>{0.9, 0.5}, 0.5), std::vector<std::size_t>{0});
  EXPECT_THROW(nms(ab, std::vector<double>{0.9}, 0.5), std::invalid_argument);
}

TEST(Nms, TiesResolveToLowerIndex) {
  const std::vector<Box> dup{{0, 0, 4, 4}, {0, 0, 4, 4}, {0, 0, 4, 4}};
  EXPECT_EQ(nms(dup, std::vector<double>{0.5, 0.5, 0.5}, 0.5), std::vector<std::size_t>{0});
}

TEST(Nms, MatchesExhaustiveOracleOn200Boxes) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    std::vector<Box> boxes;
    std::vector<double> scores;
    std::uniform_int_distribution<int> coarse(0, 20);
    for (int i = 0; i < 200; ++i) {
      boxes.push_back(random_box(rng));
      scores.push_back(coarse(rng) / 20.0);  // plenty of ties
    }
    const double thr = 0.3 + 0.02 * double(seed);
    const auto kept = nms(boxes, scores, thr);
    EXPECT_EQ(kept, oracle::nms(boxes, scores, thr));
    for (std::size_t i = 0; i < kept.size(); ++i) {
      for (std::size_t j = i + 1; j < kept.size(); ++j) EXPECT_LE(iou(boxes[kept[i]], boxes[kept[j]]), thr);
      if (i > 0) EXPECT_GE(scores[kept[i - 1]], scores[kept[i]]);
    }
  }
}

TEST(BoxDelta, Examples) {
  const Box a{0, 0, 10, 10};
  EXPECT_EQ(encode(a, a), (BoxDelta{0, 0, 0, 0}));
  const auto d = encode(a, Box{2, 0, 12, 10});
  EXPECT_NEAR(d.dx, 0.2, 1e-15);
  EXPECT_EQ(d.dy, 0.0);
  EXPECT_EQ(d.dw, 0.0);
  EXPECT_EQ(d.dh, 0.0);
  EXPECT_THROW(encode(Box{0, 0, 0, 5}, a), std::invalid_argument);
  EXPECT_THROW(decode(Box{0, 0, 5, 0}, d), std::invalid_argument);
}

TEST(BoxDelta, RoundTrip) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 1000; ++i) {
    const Box a = random_box(rng), g = random_box(rng);
    const Box back = decode(a, encode(a, g));
    EXPECT_NEAR(back.x1, g.x1, 1e-9);
    EXPECT_NEAR(back.y1, g.y1, 1e-9);
    EXPECT_NEAR(back.x2, g.x2, 1e-9);
    EXPECT_NEAR(back.y2, g.y2, 1e-9);
  }
}

TEST(BoxDelta, DecodeClampsScaleAndClipsToImage) {
  const Box a{0, 0, 16, 16};
  const Box huge = decode(a, BoxDelta{0, 0, 50, 50});
  EXPECT_NEAR(huge.width(), 1000.0, 1e-9);
  const Box clipped = decode(a, BoxDelta{0, 0, 50, 50}, ImageSize{64, 48});
  EXPECT_EQ(clipped, (Box{0, 0, 64, 48}));
}
