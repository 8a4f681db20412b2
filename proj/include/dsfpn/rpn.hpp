#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsfpn/box.hpp"
#include "dsfpn/ops.hpp"
#include "dsfpn/params.hpp"
#include "dsfpn/pyramid.hpp"

namespace dsfpn {

struct RpnConfig {
  double anchor_scale = 4.0;              // anchor side = anchor_scale · level stride
  std::vector<double> aspect_ratios{1.0};  // height / width
  double pos_iou = 0.7;
  double neg_iou = 0.3;
  std::size_t batch_per_image = 64;
  double fg_fraction = 0.5;
  std::size_t pre_nms_k = 256;
  std::size_t post_nms_n = 64;
  double nms_thresh = 0.7;
  double min_size = 1.0;  // proposals narrower than this after clipping are dropped

  std::size_t anchors_per_location() const { return aspect_ratios.size(); }

  void validate() const {
    if (aspect_ratios.empty() || anchor_scale <= 0) throw std::invalid_argument("rpn anchors need scale and ratios");
    if (!(0 <= neg_iou && neg_iou <= pos_iou && pos_iou <= 1)) {
      throw std::invalid_argument("rpn thresholds must satisfy 0 <= neg_iou <= pos_iou <= 1");
    }
    if (fg_fraction < 0 || fg_fraction > 1) throw std::invalid_argument("rpn.fg_fraction must lie in [0, 1]");
  }
};

// Anchors per level, ordered (ratio, y, x) to match the N×A×H×W prediction layout.
struct AnchorSet {
  std::vector<std::vector<Box>> levels;
  std::vector<std::size_t> heights, widths;

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& l : levels) n += l.size();
    return n;
  }
  std::vector<Box> flat() const {
    std::vector<Box> out;
    for (const auto& l : levels) out.insert(out.end(), l.begin(), l.end());
    return out;
  }
};

inline AnchorSet generate_anchors(const PyramidConfig& pyr, const RpnConfig& cfg, std::size_t image_h,
                                  std::size_t image_w) {
  AnchorSet set;
  for (std::size_t k = 0; k < pyr.num_levels; ++k) {
    const std::size_t stride = pyr.level_strides[k];
    const std::size_t h = image_h / stride, w = image_w / stride;
    const double base = cfg.anchor_scale * static_cast<double>(stride);
    std::vector<Box> level;
    level.reserve(h * w * cfg.aspect_ratios.size());
    for (double ratio : cfg.aspect_ratios) {
      const double aw = base / std::sqrt(ratio), ah = base * std::sqrt(ratio);
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const double cx = (static_cast<double>(x) + 0.5) * static_cast<double>(stride);
          const double cy = (static_cast<double>(y) + 0.5) * static_cast<double>(stride);
          level.push_back({cx - 0.5 * aw, cy - 0.5 * ah, cx + 0.5 * aw, cy + 0.5 * ah});
        }
      }
    }
    set.levels.push_back(std::move(level));
    set.heights.push_back(h);
    set.widths.push_back(w);
  }
  return set;
}

namespace names {
inline const std::string kRpnConv = "rpn.conv";
inline const std::string kRpnObjectness = "rpn.objectness";
inline const std::string kRpnDelta = "rpn.delta";
}  // namespace names

template <class T>
void init_rpn(ParamSet<T>& params, const PyramidConfig& pyr, const RpnConfig& cfg, std::mt19937_64& rng) {
  const std::size_t d = pyr.out_channels, a = cfg.anchors_per_location();
  init::conv(params, names::kRpnConv, d, d, 3, rng);
  params.add(names::kRpnObjectness + ".weight", init::normal<T>({a, d, 1, 1}, 0.01, rng));
  params.add(names::kRpnObjectness + ".bias", Tensor<T>::zeros({a}));
  params.add(names::kRpnDelta + ".weight", init::normal<T>({4 * a, d, 1, 1}, 0.01, rng));
  params.add(names::kRpnDelta + ".bias", Tensor<T>::zeros({4 * a}));
}

template <class T>
struct RpnOutput {
  std::vector<Tensor<T>> logits;  // per level N×A×H×W
  std::vector<Tensor<T>> deltas;  // per level N×4A×H×W, channel = 4·a + {dx,dy,dw,dh}
};

// One 3×3 conv + two sibling 1×1 convs, the same weights on every level.
template <class T>
RpnOutput<T> rpn_forward(const std::vector<Tensor<T>>& top_down, const ParamSet<T>& params) {
  RpnOutput<T> out;
  for (const auto& p : top_down) {
    auto hidden = ops::relu(detail::conv_layer(p, params, names::kRpnConv, 1, 1));
    out.logits.push_back(detail::conv_layer(hidden, params, names::kRpnObjectness, 1, 0));
    out.deltas.push_back(detail::conv_layer(hidden, params, names::kRpnDelta, 1, 0));
  }
  return out;
}

// Maps (image, global anchor index) to flat positions in concat(logits) and concat(deltas).
struct RpnIndexer {
  std::vector<std::size_t> level_begin;  // first global anchor index per level
  std::vector<std::size_t> logit_offset, delta_offset;
  std::vector<std::size_t> plane;  // H·W per level
  std::size_t anchors_per_location = 1;
  std::size_t batch = 1;

  RpnIndexer(const AnchorSet& anchors, std::size_t a, std::size_t n) : anchors_per_location(a), batch(n) {
    std::size_t begin = 0, lo = 0, dl = 0;
    for (std::size_t k = 0; k < anchors.levels.size(); ++k) {
      level_begin.push_back(begin);
      logit_offset.push_back(lo);
      delta_offset.push_back(dl);
      const std::size_t hw = anchors.heights[k] * anchors.widths[k];
      plane.push_back(hw);
      begin += a * hw;
      lo += n * a * hw;
      dl += n * 4 * a * hw;
    }
  }

  std::pair<std::size_t, std::size_t> locate(std::size_t global) const {
    std::size_t k = level_begin.size() - 1;
    while (global < level_begin[k]) --k;
    return {k, global - level_begin[k]};
  }
  std::size_t logit(std::size_t image, std::size_t global) const {
    auto [k, i] = locate(global);
    return logit_offset[k] + image * anchors_per_location * plane[k] + i;
  }
  std::size_t delta(std::size_t image, std::size_t global, std::size_t j) const {
    auto [k, i] = locate(global);
    const std::size_t a = i / plane[k], pos = i % plane[k];
    return delta_offset[k] + image * 4 * anchors_per_location * plane[k] + (4 * a + j) * plane[k] + pos;
  }
};

// Per-image predictions flattened to global anchor order.
struct RpnImagePredictions {
  std::vector<double> logits;
  std::vector<BoxDelta> deltas;
};

template <class T>
RpnImagePredictions image_predictions(const RpnOutput<T>& out, const RpnIndexer& idx, std::size_t image,
                                      std::size_t total_anchors) {
  std::vector<T> logits, deltas;
  for (const auto& t : out.logits) logits.insert(logits.end(), t.data().begin(), t.data().end());
  for (const auto& t : out.deltas) deltas.insert(deltas.end(), t.data().begin(), t.data().end());
  RpnImagePredictions p;
  p.logits.resize(total_anchors);
  p.deltas.resize(total_anchors);
  for (std::size_t g = 0; g < total_anchors; ++g) {
    p.logits[g] = static_cast<double>(logits[idx.logit(image, g)]);
    p.deltas[g] = {static_cast<double>(deltas[idx.delta(image, g, 0)]), static_cast<double>(deltas[idx.delta(image, g, 1)]),
                   static_cast<double>(deltas[idx.delta(image, g, 2)]), static_cast<double>(deltas[idx.delta(image, g, 3)])};
  }
  return p;
}

struct Proposal {
  Box box;
  double objectness = 0;  // in [0, 1]
  int source_stage = 0;
};

struct ProposalSettings {
  std::size_t pre_nms_k = 256;
  double nms_thresh = 0.7;
  std::size_t post_nms_n = 64;
  double min_size = 1.0;
};

// Decode, clip, keep the top pre_nms_k by logit, NMS, keep post_nms_n. Output sorted by objectness.
inline std::vector<Proposal> select_proposals(std::span<const Box> anchors, std::span<const double> logits,
                                              std::span<const BoxDelta> deltas, const ProposalSettings& s,
                                              ImageSize image) {
  if (anchors.size() != logits.size() || anchors.size() != deltas.size()) {
    throw std::invalid_argument("select_proposals: anchors, logits and deltas differ in length");
  }
  std::vector<Box> boxes;
  std::vector<double> scores;
  for (std::size_t i : score_order(logits)) {
    if (boxes.size() == s.pre_nms_k) break;
    Box b = decode(anchors[i], deltas[i], image);
    if (b.width() < s.min_size || b.height() < s.min_size) continue;
    boxes.push_back(b);
    scores.push_back(logits[i]);
  }
  std::vector<Proposal> out;
  for (std::size_t i : nms(boxes, scores, s.nms_thresh)) {
    if (out.size() == s.post_nms_n) break;
    const double z = scores[i];
    const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    out.push_back({boxes[i], p, 0});
  }
  return out;
}

enum class AnchorLabel { kIgnore = -1, kNegative = 0, kPositive = 1 };

struct AnchorAssignment {
  AnchorLabel label = AnchorLabel::kIgnore;
  int matched_gt = -1;  // argmax-IoU gt, -1 without gts
};

// Positive at IoU >= pos_iou or when the anchor is a best match for some gt; negative below neg_iou.
inline std::vector<AnchorAssignment> label_anchors(std::span<const Box> anchors, std::span<const Box> gts, double pos_iou,
                                                   double neg_iou) {
  if (!(0 <= neg_iou && neg_iou <= pos_iou && pos_iou <= 1)) throw std::invalid_argument("label_anchors: bad thresholds");
  std::vector<AnchorAssignment> out(anchors.size());
  std::vector<double> best_for_gt(gts.size(), 0.0);
  std::vector<double> best_for_anchor(anchors.size(), 0.0);
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(anchors[i], gts[g]);
      if (out[i].matched_gt < 0 || v > best_for_anchor[i]) {
        best_for_anchor[i] = v;
        out[i].matched_gt = static_cast<int>(g);
      }
      best_for_gt[g] = std::max(best_for_gt[g], v);
    }
  }
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (gts.empty() || best_for_anchor[i] < neg_iou) out[i].label = AnchorLabel::kNegative;
    if (!gts.empty() && best_for_anchor[i] >= pos_iou) out[i].label = AnchorLabel::kPositive;
  }
  // Best-match rule: ties for a gt's maximum all become positive (only when the overlap is non-zero).
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (best_for_gt[g] <= 0) continue;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      if (iou(anchors[i], gts[g]) == best_for_gt[g]) {
        out[i].label = AnchorLabel::kPositive;
        out[i].matched_gt = static_cast<int>(g);
      }
    }
  }
  return out;
}

}  // namespace dsfpn
