#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsfpn/annotations.hpp"
#include "dsfpn/box.hpp"
#include "dsfpn/heads.hpp"
#include "dsfpn/ops.hpp"
#include "dsfpn/params.hpp"
#include "dsfpn/pyramid.hpp"
#include "dsfpn/roi_align.hpp"
#include "dsfpn/rpn.hpp"
#include "dsfpn/targets.hpp"

namespace dsfpn {

// Weights of the terms of the final loss; every one defaults to 1.
struct LossWeights {
  double aux_det = 1;                   // bottom-up detection D0
  double aux_mask = 1;                  // bottom-up segmentation S0
  double mask = 1;                      // top-down segmentation (S1, or the last cascade stage)
  std::vector<double> stages{1, 1, 1};  // top-down detections D1..DT
  double rpn = 1;                       // proposal network objectness + box regression
};

struct InferenceConfig {
  double score_thresh = 0.05;
  double nms_thresh = 0.5;  // per class
  std::size_t max_detections = 100;
  std::size_t pre_nms_k = 256;
  std::size_t post_nms_n = 64;
};

struct SamplingConfig {
  std::size_t roi_batch = 32;  // per image
  double fg_fraction = 0.25;
};

struct ModelConfig {
  std::size_t num_classes = 3;
  std::size_t image_size = 64;
  PyramidConfig pyramid;
  RpnConfig rpn;
  RoiConfig roi;
  std::size_t hidden_width = 128;
  bool halve_decoupled_width = false;
  double head_init_std = 0.01;
  std::size_t mask_width = 32;
  bool ds_enabled = false;
  bool dc_enabled = false;
  bool with_masks = false;
  std::size_t num_stages = 1;
  std::size_t aux_box_source = 0;
  LossWeights loss_weights;
  std::vector<double> cascade_iou_thresholds{0.5, 0.6, 0.7};
  InferenceConfig inference;

  HeadMode head_mode() const { return dc_enabled ? HeadMode::kDecoupled : HeadMode::kCoupled; }

  HeadConfig head_config() const {
    HeadConfig h;
    h.mode = head_mode();
    h.in_features = pyramid.out_channels * roi.output_h * roi.output_w;
    h.hidden_width = hidden_width;
    h.num_classes = num_classes;
    h.halve_decoupled_width = halve_decoupled_width;
    h.init_std = head_init_std;
    return h;
  }

  std::size_t mask_h() const { return 2 * roi.output_h; }
  std::size_t mask_w() const { return 2 * roi.output_w; }

  void validate() const {
    pyramid.validate();
    rpn.validate();
    if (num_classes == 0) throw std::invalid_argument("num_classes must be positive");
    if (image_size % pyramid.level_strides.back() != 0) {
      throw std::invalid_argument("image_size must be divisible by the largest level stride");
    }
    if (num_stages != 1 && num_stages != 3) throw std::invalid_argument("num_stages must be 1 or 3");
    if (aux_box_source >= num_stages) {
      throw std::invalid_argument("aux_box_source " + std::to_string(aux_box_source) + " needs at least " +
                                  std::to_string(aux_box_source + 1) + " stages");
    }
    if (cascade_iou_thresholds.size() < num_stages) {
      throw std::invalid_argument("cascade_iou_thresholds must list one threshold per stage");
    }
    for (double t : cascade_iou_thresholds) {
      if (!(t > 0 && t < 1)) throw std::invalid_argument("cascade_iou_thresholds must lie in (0, 1)");
    }
    if (loss_weights.stages.size() < num_stages) {
      throw std::invalid_argument("loss_weights.stages must list one weight per stage");
    }
    const auto& w = loss_weights;
    bool negative = w.aux_det < 0 || w.aux_mask < 0 || w.mask < 0 || w.rpn < 0;
    for (double s : w.stages) negative = negative || s < 0;
    if (negative) throw std::invalid_argument("loss weights must be non-negative");
    if (roi.output_h == 0 || roi.output_w == 0 || roi.sampling_ratio == 0) {
      throw std::invalid_argument("roi sizes must be positive");
    }
  }
};

namespace names {
inline std::string stage_head(std::size_t stage) { return "head.stage" + std::to_string(stage + 1); }
inline const std::string kMaskHead = "mask";
inline const std::string kAuxDetHead = "aux.det";
inline const std::string kAuxMaskHead = "aux.mask";
inline const std::string kAuxPrefix = "aux.";
}  // namespace names

inline bool is_aux_param(const std::string& name) { return name.rfind(names::kAuxPrefix, 0) == 0; }

// Baseline and auxiliary parameters draw from separate streams, so the non-auxiliary part of the
// initialization is the same with dual supervision on or off.
template <class T>
ParamSet<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamSet<T> params;
  std::mt19937_64 rng(seed);
  init_backbone(params, cfg.pyramid, rng);
  init_top_down(params, cfg.pyramid, rng);
  init_rpn(params, cfg.pyramid, cfg.rpn, rng);
  const HeadConfig head = cfg.head_config();
  for (std::size_t s = 0; s < cfg.num_stages; ++s) init_detection_head(params, names::stage_head(s), head, rng);
  if (cfg.with_masks) {
    init_mask_head(params, names::kMaskHead, cfg.pyramid.out_channels, cfg.mask_width, cfg.num_classes, rng);
  }
  if (cfg.ds_enabled) {
    std::mt19937_64 aux_rng(seed ^ 0x9e3779b97f4a7c15ull);
    init_aux_laterals(params, cfg.pyramid, aux_rng);
    init_detection_head(params, names::kAuxDetHead, head, aux_rng);
    if (cfg.with_masks) {
      init_mask_head(params, names::kAuxMaskHead, cfg.pyramid.out_channels, cfg.mask_width, cfg.num_classes, aux_rng);
    }
  }
  return params;
}

// Boxes fed to one detection head, with their labels and targets.
struct RoiSet {
  std::vector<RoiRef> rois;
  std::vector<ProposalMatch> matches;
  RoiTargets targets;
};

struct RpnTargets {
  std::vector<std::size_t> logit_index;  // flat positions into concat(level logits)
  std::vector<double> objectness;        // 0 or 1 per sampled anchor
  std::vector<std::size_t> delta_index;  // 4 per positive anchor, into concat(level deltas)
  std::vector<double> delta_targets;
};

// Every non-differentiable decision of one training pass. Replaying a plan reproduces the pass with
// box coordinates, sampling and labels held fixed.
struct TrainPlan {
  RpnTargets rpn;
  std::vector<std::vector<Proposal>> proposals;  // B0 per image
  std::vector<RoiSet> stages;                    // inputs of stages 1..T
};

template <class T>
struct TrainOutputs {
  FeaturePyramid<T> pyramid;
  TrainPlan plan;
  Tensor<T> rpn_logits;  // sampled anchors
  Tensor<T> rpn_deltas;  // positives n×4; undefined without positives
  std::vector<HeadOutput<T>> stages;
  Tensor<T> mask_logits;  // top-down, foregrounds of the last stage; undefined when absent
  std::optional<HeadOutput<T>> aux_det;
  Tensor<T> aux_mask_logits;
  std::size_t aux_source = 0;
  bool skip = false;  // nothing to learn from in this batch
};

namespace detail {

inline std::vector<std::size_t> strides_of(const PyramidConfig& cfg) { return cfg.level_strides; }

inline ImageSize image_extent(const ModelConfig& cfg) {
  return {static_cast<double>(cfg.image_size), static_cast<double>(cfg.image_size)};
}

// Labels and targets for rois grouped by image (ascending image order).
inline RoiSet make_roi_set(std::vector<RoiRef> rois, const std::vector<const Sample*>& batch, double iou_threshold,
                           const ModelConfig& cfg) {
  RoiSet set;
  std::size_t begin = 0;
  while (begin < rois.size()) {
    const std::size_t image = rois[begin].image;
    std::size_t end = begin;
    std::vector<Box> boxes;
    while (end < rois.size() && rois[end].image == image) boxes.push_back(rois[end++].box);
    const auto& gts = batch[image]->instances;
    auto matches = match_proposals(boxes, gts, iou_threshold);
    auto t = build_targets(boxes, matches, gts, cfg.with_masks, cfg.mask_h(), cfg.mask_w());
    set.matches.insert(set.matches.end(), matches.begin(), matches.end());
    set.targets.labels.insert(set.targets.labels.end(), t.labels.begin(), t.labels.end());
    for (auto f : t.foreground) set.targets.foreground.push_back(begin + f);
    set.targets.reg_targets.insert(set.targets.reg_targets.end(), t.reg_targets.begin(), t.reg_targets.end());
    set.targets.mask_targets.insert(set.targets.mask_targets.end(), t.mask_targets.begin(), t.mask_targets.end());
    begin = end;
  }
  set.rois = std::move(rois);
  return set;
}

inline RoiRef make_roi(std::size_t image, const Box& box, const ModelConfig& cfg) {
  return {image, assign_level(box, cfg.pyramid), box};
}

// Regressed boxes of one head become the next stage's boxes; coordinates carry no gradient.
template <class T>
std::vector<RoiRef> refine_rois(const std::vector<RoiRef>& rois, const Tensor<T>& deltas, const ModelConfig& cfg) {
  std::vector<RoiRef> out;
  out.reserve(rois.size());
  const auto d = deltas.data();
  for (std::size_t i = 0; i < rois.size(); ++i) {
    const BoxDelta delta{double(d[4 * i]), double(d[4 * i + 1]), double(d[4 * i + 2]), double(d[4 * i + 3])};
    Box b = ensure_min_size(decode(rois[i].box, delta, image_extent(cfg)), 1.0, image_extent(cfg));
    out.push_back(make_roi(rois[i].image, b, cfg));
  }
  return out;
}

template <class T>
Tensor<T> pool(const std::vector<Tensor<T>>& maps, const std::vector<RoiRef>& rois, const ModelConfig& cfg) {
  const auto strides = strides_of(cfg.pyramid);
  return roi_align_levels<T>(maps, rois, strides, cfg.roi);
}

template <class T>
Tensor<T> mask_branch(const std::vector<Tensor<T>>& maps, const RoiSet& set, const ParamSet<T>& params,
                      const std::string& prefix, const ModelConfig& cfg) {
  if (set.targets.foreground.empty()) return {};
  std::vector<RoiRef> fg;
  for (auto i : set.targets.foreground) fg.push_back(set.rois[i]);
  return mask_forward(pool(maps, fg, cfg), params, prefix);
}

template <class T>
RpnTargets rpn_targets_for(const RpnOutput<T>& rpn, const AnchorSet& anchors, const RpnIndexer& idx,
                           const std::vector<const Sample*>& batch, const ModelConfig& cfg, std::mt19937_64& rng,
                           std::vector<std::vector<Proposal>>& proposals) {
  const auto flat = anchors.flat();
  const ProposalSettings settings{cfg.rpn.pre_nms_k, cfg.rpn.nms_thresh, cfg.rpn.post_nms_n, cfg.rpn.min_size};
  RpnTargets t;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const auto preds = image_predictions(rpn, idx, n, flat.size());
    proposals.push_back(select_proposals(flat, preds.logits, preds.deltas, settings, image_extent(cfg)));
    std::vector<Box> gt_boxes;
    for (const auto& inst : batch[n]->instances) gt_boxes.push_back(inst.box);
    const auto labels = label_anchors(flat, gt_boxes, cfg.rpn.pos_iou, cfg.rpn.neg_iou);
    std::vector<std::size_t> fg, bg;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i].label == AnchorLabel::kPositive) fg.push_back(i);
      if (labels[i].label == AnchorLabel::kNegative) bg.push_back(i);
    }
    const auto s = sample_balanced(fg, bg, cfg.rpn.batch_per_image, cfg.rpn.fg_fraction, rng);
    for (auto i : s.foreground) {
      t.logit_index.push_back(idx.logit(n, i));
      t.objectness.push_back(1.0);
      const auto target = encode(flat[i], gt_boxes[static_cast<std::size_t>(labels[i].matched_gt)]);
      const double values[4] = {target.dx, target.dy, target.dw, target.dh};
      for (std::size_t j = 0; j < 4; ++j) {
        t.delta_index.push_back(idx.delta(n, i, j));
        t.delta_targets.push_back(values[j]);
      }
    }
    for (auto i : s.background) {
      t.logit_index.push_back(idx.logit(n, i));
      t.objectness.push_back(0.0);
    }
  }
  return t;
}

// First-stage boxes: proposals plus the image's gt boxes, sampled to roi_batch per image.
inline RoiSet first_stage_rois(const std::vector<std::vector<Proposal>>& proposals,
                               const std::vector<const Sample*>& batch, const ModelConfig& cfg,
                               const SamplingConfig& sampling, std::mt19937_64& rng) {
  std::vector<RoiRef> rois;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    std::vector<Box> boxes;
    for (const auto& p : proposals[n]) boxes.push_back(p.box);
    for (const auto& inst : batch[n]->instances) boxes.push_back(inst.box);
    const auto matches = match_proposals(boxes, batch[n]->instances, cfg.cascade_iou_thresholds[0]);
    for (auto i : sample_rois(matches, sampling.roi_batch, sampling.fg_fraction, rng)) {
      rois.push_back(make_roi(n, boxes[i], cfg));
    }
  }
  return make_roi_set(std::move(rois), batch, cfg.cascade_iou_thresholds[0], cfg);
}

}  // namespace detail

// The roi set whose boxes feed the auxiliary heads: B0 (proposals), B1 or B2 (boxes regressed by
// stage 1 or 2). Each is the input set of the following top-down stage, with that stage's labels.
inline const RoiSet& select_aux_box_source(const TrainPlan& plan, const ModelConfig& cfg) {
  if (cfg.aux_box_source >= cfg.num_stages || cfg.aux_box_source >= plan.stages.size()) {
    throw std::invalid_argument("aux box source stage " + std::to_string(cfg.aux_box_source) +
                                " is not computed by a " + std::to_string(cfg.num_stages) + "-stage detector");
  }
  return plan.stages[cfg.aux_box_source];
}

// Training forward pass over a batch. With `replay`, all box-level decisions come from the plan.
template <class T>
TrainOutputs<T> forward_train(const std::vector<const Sample*>& batch, const ModelConfig& cfg,
                              const ParamSet<T>& params, const SamplingConfig& sampling, std::mt19937_64& rng,
                              const TrainPlan* replay = nullptr) {
  cfg.validate();
  if (batch.empty()) throw std::invalid_argument("forward_train: empty batch");
  for (const auto* s : batch) {
    if (s->instances.empty()) throw std::invalid_argument("forward_train: every image needs ground truth");
  }
  std::vector<const Image*> images;
  for (const auto* s : batch) images.push_back(&s->image);
  const auto input = images_to_tensor<T>(images);
  if (input.dim(2) != cfg.image_size || input.dim(3) != cfg.image_size) {
    throw DimensionError("batch images do not match model image_size");
  }

  TrainOutputs<T> out;
  out.pyramid.bottom_up = build_bottom_up(input, params, cfg.pyramid);
  out.pyramid.top_down = build_top_down(out.pyramid.bottom_up, params, cfg.pyramid);

  const auto rpn = rpn_forward(out.pyramid.top_down, params);
  const auto anchors = generate_anchors(cfg.pyramid, cfg.rpn, cfg.image_size, cfg.image_size);
  const RpnIndexer idx(anchors, cfg.rpn.anchors_per_location(), batch.size());
  if (replay) {
    out.plan = *replay;
  } else {
    out.plan.rpn = detail::rpn_targets_for(rpn, anchors, idx, batch, cfg, rng, out.plan.proposals);
    out.plan.stages.push_back(detail::first_stage_rois(out.plan.proposals, batch, cfg, sampling, rng));
  }
  if (!out.plan.rpn.logit_index.empty()) {
    out.rpn_logits = ops::gather(ops::concat(rpn.logits), out.plan.rpn.logit_index, {out.plan.rpn.logit_index.size()});
  }
  if (!out.plan.rpn.delta_index.empty()) {
    out.rpn_deltas = ops::gather(ops::concat(rpn.deltas), out.plan.rpn.delta_index,
                                 {out.plan.rpn.delta_index.size() / 4, 4});
  }
  if (out.plan.stages[0].rois.empty()) {
    out.skip = true;
    return out;
  }

  const HeadMode mode = cfg.head_mode();
  for (std::size_t s = 0; s < cfg.num_stages; ++s) {
    if (s > 0 && !replay) {
      auto refined = detail::refine_rois(out.plan.stages[s - 1].rois, out.stages[s - 1].reg_deltas, cfg);
      out.plan.stages.push_back(detail::make_roi_set(std::move(refined), batch, cfg.cascade_iou_thresholds[s], cfg));
    }
    const auto pooled = detail::pool(out.pyramid.top_down, out.plan.stages[s].rois, cfg);
    out.stages.push_back(detection_head_forward(pooled, params, names::stage_head(s), mode));
  }
  if (cfg.with_masks) {
    out.mask_logits = detail::mask_branch(out.pyramid.top_down, out.plan.stages.back(), params, names::kMaskHead, cfg);
  }

  if (cfg.ds_enabled) {
    const auto aux_maps = project_bottom_up(out.pyramid.bottom_up, params, cfg.pyramid);
    out.aux_source = cfg.aux_box_source;
    const RoiSet& source = select_aux_box_source(out.plan, cfg);
    out.aux_det = detection_head_forward(detail::pool(aux_maps, source.rois, cfg), params, names::kAuxDetHead, mode);
    if (cfg.with_masks) {
      out.aux_mask_logits = detail::mask_branch(aux_maps, source, params, names::kAuxMaskHead, cfg);
    }
  }
  return out;
}

template <class T>
struct LossTerm {
  std::string name;
  double weight = 1;
  Tensor<T> value;
};

template <class T>
struct LossReport {
  Tensor<T> total;
  std::vector<LossTerm<T>> terms;

  double term(const std::string& name) const {
    for (const auto& t : terms) {
      if (t.name == name) return static_cast<double>(t.value.item());
    }
    throw std::out_of_range("no loss term '" + name + "'");
  }
  bool has_term(const std::string& name) const {
    return std::any_of(terms.begin(), terms.end(), [&](const auto& t) { return t.name == name; });
  }
};

namespace detail {

template <class T>
Tensor<T> constant_rows(const std::vector<double>& values, std::size_t cols) {
  std::vector<T> data(values.begin(), values.end());
  return Tensor<T>::from_data({values.size() / cols, cols}, std::move(data));
}

// Cross-entropy over all rois plus smooth-L1 on foreground box deltas.
template <class T>
Tensor<T> detection_loss(const HeadOutput<T>& head, const RoiSet& set) {
  auto loss = ops::softmax_cross_entropy(head.cls_logits, set.targets.labels);
  if (set.targets.foreground.empty()) return loss;
  std::vector<double> targets;
  for (const auto& d : set.targets.reg_targets) targets.insert(targets.end(), {d.dx, d.dy, d.dw, d.dh});
  auto pred = ops::gather_rows(head.reg_deltas, set.targets.foreground);
  return ops::add(loss, ops::smooth_l1(pred, constant_rows<T>(targets, 4)));
}

// Per-pixel sigmoid cross-entropy on the channel of each foreground's class.
template <class T>
Tensor<T> mask_loss(const Tensor<T>& logits, const RoiSet& set, const ModelConfig& cfg) {
  if (!logits.defined()) return Tensor<T>::scalar(T(0));
  const std::size_t k = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  std::vector<std::size_t> idx;
  std::vector<T> targets;
  for (std::size_t f = 0; f < set.targets.foreground.size(); ++f) {
    const std::size_t cls = set.targets.labels[set.targets.foreground[f]] - 1;
    for (std::size_t p = 0; p < plane; ++p) idx.push_back((f * k + cls) * plane + p);
    for (auto v : set.targets.mask_targets[f]) targets.push_back(T(v));
  }
  const std::size_t n = set.targets.foreground.size();
  auto selected = ops::gather(logits, idx, {n, cfg.mask_h(), cfg.mask_w()});
  return ops::binary_cross_entropy_with_logits(selected, Tensor<T>::from_data(selected.shape(), std::move(targets)));
}

template <class T>
Tensor<T> rpn_loss(const TrainOutputs<T>& out) {
  const auto& t = out.plan.rpn;
  if (t.objectness.empty()) return Tensor<T>::scalar(T(0));
  auto targets = Tensor<T>::from_data({t.objectness.size()}, std::vector<T>(t.objectness.begin(), t.objectness.end()));
  auto loss = ops::binary_cross_entropy_with_logits(out.rpn_logits, targets);
  if (t.delta_targets.empty()) return loss;
  return ops::add(loss, ops::smooth_l1(out.rpn_deltas, constant_rows<T>(t.delta_targets, 4)));
}

template <class T>
LossReport<T> finish(std::vector<LossTerm<T>> terms) {
  std::vector<Tensor<T>> values;
  std::vector<T> weights;
  for (const auto& t : terms) {
    values.push_back(t.value);
    weights.push_back(static_cast<T>(t.weight));
  }
  return {ops::weighted_sum(values, weights), std::move(terms)};
}

}  // namespace detail

// L = rpn + α1·L(D0) + α2·L(D1) + α3·L(S0) + α4·L(S1); auxiliary and mask terms only when enabled.
template <class T>
LossReport<T> compute_loss_two_stage(const TrainOutputs<T>& out, const ModelConfig& cfg) {
  if (cfg.num_stages != 1) throw std::invalid_argument("two-stage loss needs num_stages == 1");
  const auto& w = cfg.loss_weights;
  std::vector<LossTerm<T>> terms;
  terms.push_back({"rpn", w.rpn, detail::rpn_loss(out)});
  if (cfg.ds_enabled) terms.push_back({"aux_det", w.aux_det, detail::detection_loss(*out.aux_det, out.plan.stages[0])});
  terms.push_back({"det1", w.stages[0], detail::detection_loss(out.stages[0], out.plan.stages[0])});
  if (cfg.ds_enabled && cfg.with_masks) {
    terms.push_back({"aux_mask", w.aux_mask, detail::mask_loss(out.aux_mask_logits, out.plan.stages[0], cfg)});
  }
  if (cfg.with_masks) terms.push_back({"mask", w.mask, detail::mask_loss(out.mask_logits, out.plan.stages[0], cfg)});
  return detail::finish(std::move(terms));
}

// L = rpn + α1·L(D0) + α2·L(S0) + α3·L(S_T) + Σ_i α_si·L(Di); the mask head sits on the last stage only.
template <class T>
LossReport<T> compute_loss_multi_stage(const TrainOutputs<T>& out, const ModelConfig& cfg) {
  if (cfg.num_stages < 2) throw std::invalid_argument("multi-stage loss needs num_stages >= 2");
  const auto& w = cfg.loss_weights;
  std::vector<LossTerm<T>> terms;
  terms.push_back({"rpn", w.rpn, detail::rpn_loss(out)});
  if (cfg.ds_enabled) {
    const RoiSet& source = select_aux_box_source(out.plan, cfg);
    terms.push_back({"aux_det", w.aux_det, detail::detection_loss(*out.aux_det, source)});
    if (cfg.with_masks) terms.push_back({"aux_mask", w.aux_mask, detail::mask_loss(out.aux_mask_logits, source, cfg)});
  }
  if (cfg.with_masks) terms.push_back({"mask", w.mask, detail::mask_loss(out.mask_logits, out.plan.stages.back(), cfg)});
  for (std::size_t s = 0; s < cfg.num_stages; ++s) {
    terms.push_back({"det" + std::to_string(s + 1), w.stages[s], detail::detection_loss(out.stages[s], out.plan.stages[s])});
  }
  return detail::finish(std::move(terms));
}

template <class T>
LossReport<T> compute_loss(const TrainOutputs<T>& out, const ModelConfig& cfg) {
  return cfg.num_stages == 1 ? compute_loss_two_stage(out, cfg) : compute_loss_multi_stage(out, cfg);
}

struct Detection {
  Box box;
  int label = 0;  // 0-based category
  double score = 0;
  Mask mask;  // image-sized; empty without a mask head
};

namespace detail {

// Bilinear resample of a mask-probability grid onto the image pixels inside the box, thresholded at 0.5.
inline Mask paste_mask(std::span<const double> probs, std::size_t mh, std::size_t mw, const Box& box,
                       std::size_t image_h, std::size_t image_w) {
  Mask m(image_h, image_w);
  const auto x_lo = static_cast<std::size_t>(std::max(0.0, std::floor(box.x1)));
  const auto y_lo = static_cast<std::size_t>(std::max(0.0, std::floor(box.y1)));
  const auto x_hi = std::min<std::size_t>(image_w, static_cast<std::size_t>(std::ceil(box.x2)));
  const auto y_hi = std::min<std::size_t>(image_h, static_cast<std::size_t>(std::ceil(box.y2)));
  for (std::size_t y = y_lo; y < y_hi; ++y) {
    for (std::size_t x = x_lo; x < x_hi; ++x) {
      const double px = double(x) + 0.5, py = double(y) + 0.5;
      if (px < box.x1 || px > box.x2 || py < box.y1 || py > box.y2) continue;
      double u = std::clamp((px - box.x1) / box.width() * double(mw) - 0.5, 0.0, double(mw - 1));
      double v = std::clamp((py - box.y1) / box.height() * double(mh) - 0.5, 0.0, double(mh - 1));
      const auto u0 = static_cast<std::size_t>(u), v0 = static_cast<std::size_t>(v);
      const std::size_t u1 = std::min(u0 + 1, mw - 1), v1 = std::min(v0 + 1, mh - 1);
      const double lu = u - double(u0), lv = v - double(v0);
      const double p = (1 - lv) * ((1 - lu) * probs[v0 * mw + u0] + lu * probs[v0 * mw + u1]) +
                       lv * ((1 - lu) * probs[v1 * mw + u0] + lu * probs[v1 * mw + u1]);
      m.at(y, x) = p >= 0.5 ? 1 : 0;
    }
  }
  return m;
}

}  // namespace detail

// Inference over the top-down path only. Auxiliary parameters, present or not, are never read.
template <class T>
std::vector<Detection> forward_infer(const Image& image, const ModelConfig& cfg, const ParamSet<T>& params) {
  cfg.validate();
  NoGradGuard no_grad;
  const auto input = images_to_tensor<T>({&image});
  const auto bottom_up = build_bottom_up(input, params, cfg.pyramid);
  const auto top_down = build_top_down(bottom_up, params, cfg.pyramid);
  const auto rpn = rpn_forward(top_down, params);
  const auto anchors = generate_anchors(cfg.pyramid, cfg.rpn, cfg.image_size, cfg.image_size);
  const RpnIndexer idx(anchors, cfg.rpn.anchors_per_location(), 1);
  const auto flat = anchors.flat();
  const auto preds = image_predictions(rpn, idx, 0, flat.size());
  const ProposalSettings settings{cfg.inference.pre_nms_k, cfg.rpn.nms_thresh, cfg.inference.post_nms_n,
                                  cfg.rpn.min_size};
  const auto proposals = select_proposals(flat, preds.logits, preds.deltas, settings, detail::image_extent(cfg));
  if (proposals.empty()) return {};

  std::vector<RoiRef> rois;
  for (const auto& p : proposals) rois.push_back(detail::make_roi(0, p.box, cfg));
  HeadOutput<T> head;
  for (std::size_t s = 0; s < cfg.num_stages; ++s) {
    if (s > 0) rois = detail::refine_rois(rois, head.reg_deltas, cfg);
    head = detection_head_forward(detail::pool(top_down, rois, cfg), params, names::stage_head(s), cfg.head_mode());
  }

  const std::size_t k1 = cfg.num_classes + 1;
  const auto logits = head.cls_logits.data();
  const auto deltas = head.reg_deltas.data();
  std::vector<Detection> dets;
  std::vector<Box> final_boxes;
  std::vector<std::vector<double>> probs(rois.size(), std::vector<double>(k1));
  for (std::size_t r = 0; r < rois.size(); ++r) {
    double m = -1e300;
    for (std::size_t c = 0; c < k1; ++c) m = std::max(m, double(logits[r * k1 + c]));
    double z = 0;
    for (std::size_t c = 0; c < k1; ++c) z += std::exp(double(logits[r * k1 + c]) - m);
    for (std::size_t c = 0; c < k1; ++c) probs[r][c] = std::exp(double(logits[r * k1 + c]) - m) / z;
    const BoxDelta d{double(deltas[4 * r]), double(deltas[4 * r + 1]), double(deltas[4 * r + 2]), double(deltas[4 * r + 3])};
    final_boxes.push_back(decode(rois[r].box, d, detail::image_extent(cfg)));
  }
  for (std::size_t c = 1; c < k1; ++c) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (std::size_t r = 0; r < rois.size(); ++r) {
      if (probs[r][c] < cfg.inference.score_thresh) continue;
      if (!(final_boxes[r].width() > 0 && final_boxes[r].height() > 0)) continue;
      boxes.push_back(final_boxes[r]);
      scores.push_back(probs[r][c]);
    }
    for (auto i : nms(boxes, scores, cfg.inference.nms_thresh)) {
      dets.push_back({boxes[i], static_cast<int>(c) - 1, scores[i], {}});
    }
  }
  std::stable_sort(dets.begin(), dets.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  if (dets.size() > cfg.inference.max_detections) dets.resize(cfg.inference.max_detections);

  if (cfg.with_masks && !dets.empty()) {
    std::vector<RoiRef> mask_rois;
    for (const auto& d : dets) mask_rois.push_back(detail::make_roi(0, ensure_min_size(d.box, 1.0, detail::image_extent(cfg)), cfg));
    const auto logits_m = mask_forward(detail::pool(top_down, mask_rois, cfg), params, names::kMaskHead);
    const std::size_t mh = cfg.mask_h(), mw = cfg.mask_w(), k = cfg.num_classes;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      std::vector<double> p(mh * mw);
      const std::size_t base = (i * k + static_cast<std::size_t>(dets[i].label)) * mh * mw;
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double z = double(logits_m.data()[base + j]);
        p[j] = 1.0 / (1.0 + std::exp(-z));
      }
      dets[i].mask = detail::paste_mask(p, mh, mw, mask_rois[i].box, cfg.image_size, cfg.image_size);
    }
  }
  return dets;
}

// Parameter names and shapes of the model a config describes.
inline ParamInventory expected_inventory(const ModelConfig& cfg) { return inventory(init_params<float>(cfg, 0)); }

// Removes every auxiliary head and auxiliary lateral. Rejects names the configured model cannot have.
template <class T>
ParamSet<T> strip_aux_heads(const ParamSet<T>& params, const ModelConfig& cfg) {
  ModelConfig with_aux = cfg;
  with_aux.ds_enabled = true;
  const auto known = expected_inventory(with_aux);
  ParamSet<T> out;
  for (const auto& [name, t] : params) {
    if (!known.count(name)) throw std::invalid_argument("unknown parameter '" + name + "'");
    if (!is_aux_param(name)) out.add(name, t.detach());
  }
  return out;
}

}  // namespace dsfpn
