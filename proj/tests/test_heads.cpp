#include <gtest/gtest.h>

#include <random>

#include "dsfpn/heads.hpp"
#include "dsfpn/roi_align.hpp"
#include "support/grad_check.hpp"

using namespace dsfpn;
using dsfpn::testing::random_tensor;

namespace {

HeadConfig small_head(HeadMode mode) {
  HeadConfig h;
  h.mode = mode;
  h.in_features = 3 * 2 * 2;
  h.hidden_width = 8;
  h.num_classes = 3;
  h.init_std = 0.3;
  return h;
}

ParamSet<double> head_params(HeadMode mode, std::uint64_t seed) {
  ParamSet<double> p;
  std::mt19937_64 rng(seed);
  init_detection_head(p, "h", small_head(mode), rng);
  return p;
}

void fill(ParamSet<double>& p, const std::string& prefix, double value) {
  for (auto& [name, t] : p) {
    if (name.rfind(prefix, 0) == 0) {
      for (auto& v : t.mutable_data()) v = value;
    }
  }
}

std::vector<double> values(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

double grad_norm(const Tensor<double>& t) {
  double n = 0;
  for (double g : t.grad()) n += g * g;
  return std::sqrt(n);
}

bool zero_grad_or_none(const Tensor<double>& t) { return !t.has_grad() || grad_norm(t) == 0.0; }

}  // namespace

TEST(CoupledHead, ZeroWeightsGiveZeroOutputs) {
  auto p = head_params(HeadMode::kCoupled, 0);
  fill(p, "h", 0.0);
  std::mt19937_64 rng(1);
  const auto out = coupled_forward(random_tensor({5, 3, 2, 2}, rng), p, "h");
  EXPECT_EQ(out.cls_logits.shape(), (Shape{5, 4}));
  EXPECT_EQ(out.reg_deltas.shape(), (Shape{5, 4}));
  for (double v : out.cls_logits.data()) EXPECT_EQ(v, 0.0);
  for (double v : out.reg_deltas.data()) EXPECT_EQ(v, 0.0);
}

TEST(CoupledHead, SharedTrunkCouplesBothOutputs) {
  auto p = head_params(HeadMode::kCoupled, 2);
  std::mt19937_64 rng(2);
  const auto x = random_tensor({4, 3, 2, 2}, rng);
  const auto base = coupled_forward(x, p, "h");
  auto moved = p.clone();
  for (auto& v : moved.at("h.fc1.weight").mutable_data()) v *= 1.5;
  const auto out = coupled_forward(x, moved, "h");
  EXPECT_NE(values(base.cls_logits), values(out.cls_logits));
  EXPECT_NE(values(base.reg_deltas), values(out.reg_deltas));

  backward(ops::softmax_cross_entropy(base.cls_logits, std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_GT(grad_norm(p.at("h.fc1.weight")), 0.0);
  EXPECT_THROW(decoupled_forward(x, p, "h"), std::invalid_argument);
}

TEST(DecoupledHead, ZeroRegressionTowerLeavesClassificationAlone) {
  auto p = head_params(HeadMode::kDecoupled, 3);
  std::mt19937_64 rng(3);
  const auto x = random_tensor({4, 3, 2, 2}, rng);
  const auto base = decoupled_forward(x, p, "h");
  fill(p, "h.reg", 0.0);
  const auto out = decoupled_forward(x, p, "h");
  EXPECT_EQ(values(base.cls_logits), values(out.cls_logits));
  for (double v : out.reg_deltas.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(coupled_forward(x, p, "h"), std::invalid_argument);
}

TEST(DecoupledHead, GradientsStayInTheirTower) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const auto x = random_tensor({6, 3, 2, 2}, rng);
    auto p = head_params(HeadMode::kDecoupled, seed);
    auto out = decoupled_forward(x, p, "h");
    backward(ops::softmax_cross_entropy(out.cls_logits, std::vector<std::size_t>{0, 1, 2, 3, 1, 2}));
    for (auto name : {"h.reg_fc1.weight", "h.reg_fc1.bias", "h.reg_fc2.weight", "h.reg_fc2.bias", "h.reg.weight"}) {
      EXPECT_TRUE(zero_grad_or_none(p.at(name))) << name;
    }
    EXPECT_GT(grad_norm(p.at("h.cls_fc1.weight")), 0.0);

    p.zero_grad();
    out = decoupled_forward(x, p, "h");
    backward(ops::smooth_l1(out.reg_deltas, random_tensor({6, 4}, rng)));
    for (auto name : {"h.cls_fc1.weight", "h.cls_fc1.bias", "h.cls_fc2.weight", "h.cls_fc2.bias", "h.cls.weight"}) {
      EXPECT_TRUE(zero_grad_or_none(p.at(name))) << name;
    }
    EXPECT_GT(grad_norm(p.at("h.reg_fc1.weight")), 0.0);
  }
}

TEST(DecoupledHead, CopiedCoupledWeightsReproduceCoupledOutputs) {
  const auto coupled = head_params(HeadMode::kCoupled, 7);
  ParamSet<double> dec;
  for (auto layer : {"fc1", "fc2"}) {
    for (auto part : {".weight", ".bias"}) {
      const auto& w = coupled.at(std::string("h.") + layer + part);
      dec.add(std::string("h.cls_") + layer + part, w.detach());
      dec.add(std::string("h.reg_") + layer + part, w.detach());
    }
  }
  for (auto name : {"h.cls.weight", "h.cls.bias", "h.reg.weight", "h.reg.bias"}) dec.add(name, coupled.at(name).detach());
  std::mt19937_64 rng(7);
  const auto x = random_tensor({5, 3, 2, 2}, rng);
  const auto a = coupled_forward(x, coupled, "h");
  const auto b = decoupled_forward(x, dec, "h");
  EXPECT_EQ(values(a.cls_logits), values(b.cls_logits));
  EXPECT_EQ(values(a.reg_deltas), values(b.reg_deltas));
}

TEST(DetectionHead, DecoupledTrunkHasTwiceTheParameters) {
  auto trunk = [](const ParamSet<double>& p) {
    std::size_t n = 0;
    for (const auto& [name, t] : p) {
      if (name.find("fc") != std::string::npos) n += t.numel();
    }
    return n;
  };
  const auto c = head_params(HeadMode::kCoupled, 0), d = head_params(HeadMode::kDecoupled, 0);
  EXPECT_EQ(trunk(d), 2 * trunk(c));
  EXPECT_EQ(d.scalar_count() - trunk(d), c.scalar_count() - trunk(c));

  auto halved = small_head(HeadMode::kDecoupled);
  halved.halve_decoupled_width = true;
  EXPECT_EQ(halved.tower_width(), 4u);
}

TEST(DetectionHead, SameContentOnDifferentLevelsGivesSameOutputs) {
  std::mt19937_64 rng(9);
  const auto map = random_tensor({1, 3, 8, 8}, rng);
  const std::vector<Tensor<double>> levels{map, map.detach()};
  const std::size_t strides[] = {2, 4};
  const Box fine{3, 2, 11, 13};
  const Box coarse{6, 4, 22, 26};
  const std::vector<RoiRef> rois{{0, 0, fine}, {0, 1, coarse}};
  const auto pooled = roi_align_levels<double>(levels, rois, strides, RoiConfig{2, 2, 2});
  const auto p = head_params(HeadMode::kDecoupled, 9);
  const auto out = detection_head_forward(pooled, p, "h", HeadMode::kDecoupled);
  const auto cls = values(out.cls_logits);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(cls[c], cls[4 + c]);
}

TEST(MaskHead, ZeroWeightsShapeAndGradient) {
  ParamSet<double> p;
  std::mt19937_64 rng(4);
  init_mask_head(p, "m", 3, 4, 2, rng);
  const auto x = random_tensor({3, 3, 4, 5}, rng);
  const auto logits = mask_forward(x, p, "m");
  EXPECT_EQ(logits.shape(), (Shape{3, 2, 8, 10}));

  backward(ops::binary_cross_entropy_with_logits(logits, Tensor<double>::full(logits.shape(), 1.0)));
  EXPECT_GT(grad_norm(p.at("m.conv1.weight")), 0.0);

  fill(p, "m", 0.0);
  const auto zero = mask_forward(x, p, "m");
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);
  for (double v : ops::sigmoid(zero).data()) EXPECT_EQ(v, 0.5);
}
