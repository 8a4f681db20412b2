#include <gtest/gtest.h>

#include <random>

#include "dsfpn/model.hpp"
#include "support/fixtures.hpp"

using namespace dsfpn;
using dsfpn::testing::micro_config;
using dsfpn::testing::micro_dataset;
using dsfpn::testing::micro_sampling;

namespace {

std::vector<const Sample*> batch_of(const Dataset& d, std::size_t begin, std::size_t n) {
  std::vector<const Sample*> out;
  for (std::size_t i = begin; i < begin + n; ++i) out.push_back(&d.samples[i]);
  return out;
}

std::vector<double> values(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

TrainOutputs<double> run(const ModelConfig& cfg, const ParamSet<double>& p, const std::vector<const Sample*>& batch,
                         std::uint64_t seed, const TrainPlan* replay = nullptr) {
  std::mt19937_64 rng(seed);
  return forward_train(batch, cfg, p, micro_sampling(), rng, replay);
}

double hand_sum(const LossReport<double>& r) {
  double s = 0;
  for (const auto& t : r.terms) s += t.weight * t.value.item();
  return s;
}

std::vector<std::string> term_names(const LossReport<double>& r) {
  std::vector<std::string> out;
  for (const auto& t : r.terms) out.push_back(t.name);
  return out;
}

}  // namespace

class ModelTest : public ::testing::Test {
 protected:
  Dataset data = micro_dataset(6, 41);
};

TEST_F(ModelTest, BaselineHasNoAuxiliaryParts) {
  const auto cfg = micro_config(false, false, true);
  const auto p = init_params<double>(cfg, 0);
  for (const auto& [name, _] : p) EXPECT_FALSE(is_aux_param(name)) << name;
  const auto out = run(cfg, p, batch_of(data, 0, 2), 1);
  EXPECT_FALSE(out.aux_det.has_value());
  EXPECT_FALSE(out.aux_mask_logits.defined());
  const auto loss = compute_loss(out, cfg);
  EXPECT_EQ(term_names(loss), (std::vector<std::string>{"rpn", "det1", "mask"}));
}

TEST_F(ModelTest, NonAuxiliaryInitIsIndependentOfDualSupervision) {
  for (std::size_t stages : {1u, 3u}) {
    const auto base = init_params<double>(micro_config(false, true, true, stages), 5);
    const auto ds = init_params<double>(micro_config(true, true, true, stages), 5);
    EXPECT_EQ(strip_aux_heads(ds, micro_config(true, true, true, stages)).checksum(), base.checksum());
  }
}

TEST_F(ModelTest, TermsAndOrder) {
  auto cfg = micro_config(true, true, true);
  auto p = init_params<double>(cfg, 1);
  auto loss = compute_loss(run(cfg, p, batch_of(data, 0, 2), 2), cfg);
  EXPECT_EQ(term_names(loss), (std::vector<std::string>{"rpn", "aux_det", "det1", "aux_mask", "mask"}));

  cfg.with_masks = false;
  p = init_params<double>(cfg, 1);
  loss = compute_loss(run(cfg, p, batch_of(data, 0, 2), 2), cfg);
  EXPECT_EQ(term_names(loss), (std::vector<std::string>{"rpn", "aux_det", "det1"}));

  cfg = micro_config(true, false, true, 3);
  p = init_params<double>(cfg, 1);
  loss = compute_loss(run(cfg, p, batch_of(data, 0, 2), 2), cfg);
  EXPECT_EQ(term_names(loss),
            (std::vector<std::string>{"rpn", "aux_det", "aux_mask", "mask", "det1", "det2", "det3"}));
  EXPECT_THROW(compute_loss_two_stage(run(cfg, p, batch_of(data, 0, 1), 2), cfg), std::invalid_argument);
}

TEST_F(ModelTest, TotalEqualsSumOfWeightedTerms) {
  for (std::size_t stages : {1u, 3u}) {
    auto cfg = micro_config(true, true, true, stages);
    cfg.loss_weights = {0.7, 1.3, 0.4, {1.0, 0.5, 2.0}, 0.9};
    const auto p = init_params<double>(cfg, 3);
    const auto loss = compute_loss(run(cfg, p, batch_of(data, 1, 1), 4), cfg);
    EXPECT_NEAR(loss.total.item(), hand_sum(loss), 1e-12);
  }
}

TEST_F(ModelTest, ZeroAuxiliaryWeightsRecoverBaselineLoss) {
  for (std::size_t stages : {1u, 3u}) {
    auto ds = micro_config(true, true, true, stages);
    ds.loss_weights.aux_det = 0;
    ds.loss_weights.aux_mask = 0;
    const auto base = micro_config(false, true, true, stages);
    const auto batch = batch_of(data, 0, 2);
    const auto a = compute_loss(run(ds, init_params<double>(ds, 8), batch, 9), ds);
    const auto b = compute_loss(run(base, init_params<double>(base, 8), batch, 9), base);
    EXPECT_EQ(a.total.item(), b.total.item()) << stages << " stages";
  }
}

TEST_F(ModelTest, DeterministicForFixedSeeds) {
  const auto cfg = micro_config(true, true, true, 3);
  const auto batch = batch_of(data, 2, 2);
  const auto a = run(cfg, init_params<double>(cfg, 4), batch, 6);
  const auto b = run(cfg, init_params<double>(cfg, 4), batch, 6);
  ASSERT_EQ(a.stages.size(), b.stages.size());
  for (std::size_t s = 0; s < a.stages.size(); ++s) {
    EXPECT_EQ(values(a.stages[s].cls_logits), values(b.stages[s].cls_logits));
    EXPECT_EQ(values(a.stages[s].reg_deltas), values(b.stages[s].reg_deltas));
  }
  EXPECT_EQ(values(a.aux_det->cls_logits), values(b.aux_det->cls_logits));
  EXPECT_EQ(values(a.mask_logits), values(b.mask_logits));
  EXPECT_EQ(compute_loss(a, cfg).total.item(), compute_loss(b, cfg).total.item());
}

TEST_F(ModelTest, ReplayReproducesThePass) {
  const auto cfg = micro_config(true, true, true, 3);
  const auto p = init_params<double>(cfg, 4);
  const auto batch = batch_of(data, 0, 2);
  const auto first = run(cfg, p, batch, 6);
  const auto again = run(cfg, p, batch, 999, &first.plan);
  EXPECT_EQ(compute_loss(first, cfg).total.item(), compute_loss(again, cfg).total.item());
}

TEST_F(ModelTest, AuxiliaryHeadsReadTheConfiguredBoxes) {
  auto cfg = micro_config(true, false, false, 3);
  const auto p = init_params<double>(cfg, 2);
  const auto batch = batch_of(data, 0, 2);
  const auto out = run(cfg, p, batch, 3);
  ASSERT_EQ(out.plan.stages.size(), 3u);

  // Stage-0 boxes are proposals or gt boxes verbatim.
  for (const auto& r : out.plan.stages[0].rois) {
    bool found = false;
    for (const auto& prop : out.plan.proposals[r.image]) found |= prop.box == r.box;
    for (const auto& inst : batch[r.image]->instances) found |= inst.box == r.box;
    EXPECT_TRUE(found);
  }
  // Stage-1 boxes are stage-0 boxes decoded with D1's deltas.
  const auto d = out.stages[0].reg_deltas.data();
  const ImageSize extent{32, 32};
  for (std::size_t i = 0; i < out.plan.stages[1].rois.size(); ++i) {
    const BoxDelta delta{d[4 * i], d[4 * i + 1], d[4 * i + 2], d[4 * i + 3]};
    const Box want = ensure_min_size(decode(out.plan.stages[0].rois[i].box, delta, extent), 1.0, extent);
    EXPECT_EQ(out.plan.stages[1].rois[i].box, want);
  }
  for (std::size_t source : {0u, 1u, 2u}) {
    cfg.aux_box_source = source;
    EXPECT_EQ(&select_aux_box_source(out.plan, cfg), &out.plan.stages[source]);
  }
  const auto two_stage = micro_config(true, false, false, 1);
  auto bad = two_stage;
  bad.aux_box_source = 1;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  EXPECT_THROW(select_aux_box_source(out.plan, bad), std::invalid_argument);
}

TEST_F(ModelTest, AuxiliaryOnlyLossReachesBackboneButNotTopDown) {
  auto cfg = micro_config(true, true, true);
  cfg.loss_weights = {1, 1, 0, {0, 0, 0}, 0};
  auto p = init_params<double>(cfg, 11);
  backward(compute_loss(run(cfg, p, batch_of(data, 0, 2), 12), cfg).total);
  for (const auto& [name, t] : p) {
    double norm = 0;
    if (t.has_grad()) {
      for (double g : t.grad()) norm += g * g;
    }
    const bool top_down_only = name.rfind("fpn.", 0) == 0 || name.rfind("rpn.", 0) == 0 ||
                               name.rfind("head.", 0) == 0 || name.rfind("mask.", 0) == 0;
    if (top_down_only) EXPECT_EQ(norm, 0.0) << name;
    if (name.rfind("backbone.", 0) == 0 && name.find("weight") != std::string::npos) EXPECT_GT(norm, 0.0) << name;
  }
}

TEST_F(ModelTest, EmptyGroundTruthRejected) {
  const auto cfg = micro_config(false, false, false);
  Sample empty = data.samples[0];
  empty.instances.clear();
  std::mt19937_64 rng(0);
  EXPECT_THROW(forward_train<double>({&empty}, cfg, init_params<double>(cfg, 0), micro_sampling(), rng),
               std::invalid_argument);
}

TEST_F(ModelTest, ConfigValidation) {
  auto cfg = micro_config(false, false, false);
  cfg.num_stages = 2;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = micro_config(false, false, false);
  cfg.loss_weights.aux_det = -1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = micro_config(false, false, false);
  cfg.image_size = 36;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST_F(ModelTest, StripMatchesBaselineInventory) {
  for (std::size_t stages : {1u, 3u}) {
    for (bool dc : {false, true}) {
      const auto ds = micro_config(true, dc, true, stages);
      const auto base = micro_config(false, dc, true, stages);
      const auto trained = init_params<float>(ds, 0);
      EXPECT_GT(trained.size(), init_params<float>(base, 0).size());
      const auto stripped = strip_aux_heads(trained, ds);
      EXPECT_EQ(inventory(stripped), expected_inventory(base));
      EXPECT_EQ(stripped.scalar_count(), init_params<float>(base, 0).scalar_count());
      const auto plain = init_params<float>(base, 3);
      EXPECT_EQ(strip_aux_heads(plain, base).checksum(), plain.checksum());
    }
  }
  auto junk = init_params<float>(micro_config(false, false, false), 0);
  junk.add("head.stage9.fc1.weight", Tensor<float>::zeros({1}));
  EXPECT_THROW(strip_aux_heads(junk, micro_config(false, false, false)), std::invalid_argument);
}

TEST_F(ModelTest, InferenceTraceAndOutputsIgnoreAuxiliaryWeights) {
  for (std::size_t stages : {1u, 3u}) {
    auto ds = micro_config(true, true, true, stages);
    ds.inference.score_thresh = 0.0;
    auto base = ds;
    base.ds_enabled = false;
    const auto full = init_params<double>(ds, 21);
    const auto stripped = strip_aux_heads(full, ds);
    for (std::size_t i = 0; i < 3; ++i) {
      const auto& image = data.samples[i].image;
      std::vector<Detection> with_aux, without;
      std::vector<OpRecord> trace_ds, trace_base;
      {
        OpTrace t;
        with_aux = forward_infer(image, ds, full);
        trace_ds = t.records();
      }
      {
        OpTrace t;
        without = forward_infer(image, base, stripped);
        trace_base = t.records();
      }
      EXPECT_FALSE(trace_ds.empty());
      EXPECT_EQ(trace_ds, trace_base);
      ASSERT_EQ(with_aux.size(), without.size());
      ASSERT_FALSE(with_aux.empty());
      for (std::size_t k = 0; k < with_aux.size(); ++k) {
        EXPECT_EQ(with_aux[k].box, without[k].box);
        EXPECT_EQ(with_aux[k].score, without[k].score);
        EXPECT_EQ(with_aux[k].label, without[k].label);
        EXPECT_EQ(with_aux[k].mask, without[k].mask);
        EXPECT_EQ(with_aux[k].mask.height, 32u);
      }
    }
  }
}

TEST_F(ModelTest, InferenceWithNothingAboveThresholdIsEmpty) {
  auto cfg = micro_config(false, false, true);
  cfg.inference.score_thresh = 0.999;
  const auto p = init_params<double>(cfg, 0);
  EXPECT_TRUE(forward_infer(Image(32, 32), cfg, p).empty());
  cfg.inference.score_thresh = 0.0;
  for (const auto& d : forward_infer(data.samples[0].image, cfg, p)) {
    EXPECT_GE(d.score, 0.0);
    EXPECT_LE(d.score, 1.0);
  }
}
