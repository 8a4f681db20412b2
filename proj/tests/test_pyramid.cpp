#include <gtest/gtest.h>

#include <random>

#include "dsfpn/pyramid.hpp"
#include "support/grad_check.hpp"

using namespace dsfpn;
using dsfpn::testing::random_tensor;

namespace {

ParamSet<double> pyramid_params(const PyramidConfig& cfg, std::uint64_t seed) {
  ParamSet<double> p;
  std::mt19937_64 rng(seed);
  init_backbone(p, cfg, rng);
  init_top_down(p, cfg, rng);
  return p;
}

void zero_matching(ParamSet<double>& p, const std::string& prefix) {
  for (auto& [name, t] : p) {
    if (name.rfind(prefix, 0) == 0) {
      for (auto& v : t.mutable_data()) v = 0;
    }
  }
}

bool all_zero(const Tensor<double>& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double v) { return v == 0.0; });
}

}  // namespace

TEST(Pyramid, ShapesAtDefaultStrides) {
  PyramidConfig cfg;
  const auto p = pyramid_params(cfg, 0);
  std::mt19937_64 rng(1);
  const auto image = random_tensor({1, 3, 64, 64}, rng);
  const auto bu = build_bottom_up(image, p, cfg);
  const auto td = build_top_down(bu, p, cfg);
  ASSERT_EQ(bu.size(), 4u);
  ASSERT_EQ(td.size(), 4u);
  const std::size_t sizes[] = {32, 16, 8, 4};
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(bu[k].shape(), (Shape{1, cfg.backbone_channels[k], sizes[k], sizes[k]}));
    EXPECT_EQ(td[k].shape(), (Shape{1, cfg.out_channels, sizes[k], sizes[k]}));
  }
}

TEST(Pyramid, IndivisibleInputRejected) {
  PyramidConfig cfg;
  const auto p = pyramid_params(cfg, 0);
  EXPECT_THROW(build_bottom_up(Tensor<double>::zeros({1, 3, 40, 40}), p, cfg), DimensionError);
}

TEST(Pyramid, ZeroWeightsGiveZeroMaps) {
  PyramidConfig cfg;
  auto p = pyramid_params(cfg, 0);
  std::mt19937_64 rng(2);
  const auto image = random_tensor({1, 3, 32, 32}, rng);
  auto td_zero = p.clone();
  zero_matching(td_zero, "fpn.");
  for (const auto& m : build_top_down(build_bottom_up(image, td_zero, cfg), td_zero, cfg)) EXPECT_TRUE(all_zero(m));
  zero_matching(p, "backbone.");
  for (const auto& m : build_bottom_up(image, p, cfg)) EXPECT_TRUE(all_zero(m));
}

TEST(Pyramid, LossOnLastMapReachesFirstConv) {
  PyramidConfig cfg;
  auto p = pyramid_params(cfg, 3);
  std::mt19937_64 rng(3);
  const auto bu = build_bottom_up(random_tensor({1, 3, 32, 32}, rng, 1.0), p, cfg);
  backward(ops::sum(bu.back()));
  const auto& w = p.at(names::backbone_conv(0, 1) + ".weight");
  ASSERT_TRUE(w.has_grad());
  double norm = 0;
  for (double g : w.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(Pyramid, CoarsestMapInfluencesEveryFinerLevel) {
  PyramidConfig cfg;
  const auto p = pyramid_params(cfg, 4);
  std::mt19937_64 rng(4);
  auto bu = build_bottom_up(random_tensor({1, 3, 32, 32}, rng), p, cfg);
  const auto base = build_top_down(bu, p, cfg);
  auto top = bu.back().detach();
  for (auto& v : top.mutable_data()) v += 1.0;
  bu.back() = top;
  const auto moved = build_top_down(bu, p, cfg);
  for (std::size_t k = 0; k + 1 < cfg.num_levels; ++k) {
    double diff = 0;
    for (std::size_t i = 0; i < base[k].numel(); ++i) diff += std::abs(base[k].data()[i] - moved[k].data()[i]);
    EXPECT_GT(diff, 0.0) << "level " << k;
  }
}

TEST(Pyramid, AssignLevel) {
  PyramidConfig cfg;
  EXPECT_EQ(assign_level(Box{0, 0, 16, 16}, cfg), 2u);
  EXPECT_EQ(assign_level(Box{0, 0, 4, 4}, cfg), 0u);
  EXPECT_EQ(assign_level(Box{0, 0, 64, 64}, cfg), 3u);
  EXPECT_THROW(assign_level(Box{0, 0, 0, 4}, cfg), std::invalid_argument);
  std::size_t last = 0;
  for (double side = 1; side < 80; side += 0.25) {
    const auto k = assign_level(Box{0, 0, side, side}, cfg);
    EXPECT_GE(k, last);
    last = k;
  }
}

TEST(Pyramid, ConfigValidation) {
  PyramidConfig cfg;
  cfg.level_strides = {2, 4, 6, 16};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = PyramidConfig{};
  cfg.num_levels = 3;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}
