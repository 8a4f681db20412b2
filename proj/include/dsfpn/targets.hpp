#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "dsfpn/annotations.hpp"
#include "dsfpn/box.hpp"
#include "dsfpn/sampling.hpp"

namespace dsfpn {

struct ProposalMatch {
  bool foreground = false;
  int gt = -1;           // best-IoU gt, -1 when there is none
  std::size_t label = 0;  // 0 = background, category + 1 otherwise
  double iou = 0;
};

// Foreground when the best IoU reaches the threshold. Ties resolve to the lower gt index.
inline std::vector<ProposalMatch> match_proposals(std::span<const Box> proposals, std::span<const Instance> gts,
                                                  double iou_threshold) {
  if (!(iou_threshold > 0 && iou_threshold < 1)) throw std::invalid_argument("match threshold must lie in (0, 1)");
  std::vector<ProposalMatch> out(proposals.size());
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(proposals[i], gts[g].box);
      if (out[i].gt < 0 || v > out[i].iou) {
        out[i].iou = v;
        out[i].gt = static_cast<int>(g);
      }
    }
    if (out[i].gt >= 0 && out[i].iou >= iou_threshold) {
      out[i].foreground = true;
      out[i].label = static_cast<std::size_t>(gts[out[i].gt].category) + 1;
    }
  }
  return out;
}

// Foreground indices first, then background, each ascending.
inline std::vector<std::size_t> sample_rois(std::span<const ProposalMatch> matches, std::size_t roi_batch,
                                            double fg_fraction, std::mt19937_64& rng) {
  std::vector<std::size_t> fg, bg;
  for (std::size_t i = 0; i < matches.size(); ++i) (matches[i].foreground ? fg : bg).push_back(i);
  auto s = sample_balanced(std::move(fg), std::move(bg), roi_batch, fg_fraction, rng);
  s.foreground.insert(s.foreground.end(), s.background.begin(), s.background.end());
  return s.foreground;
}

// Samples the gt mask inside `box` on an out_h×out_w grid of cell centers; bilinear, then thresholded at 0.5.
inline std::vector<std::uint8_t> crop_mask_target(const Mask& mask, const Box& box, std::size_t out_h,
                                                  std::size_t out_w) {
  std::vector<std::uint8_t> out(out_h * out_w);
  auto value = [&](double y, double x) {
    y = std::clamp(y - 0.5, 0.0, double(mask.height - 1));
    x = std::clamp(x - 0.5, 0.0, double(mask.width - 1));
    const auto y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
    const std::size_t y1 = std::min(y0 + 1, mask.height - 1), x1 = std::min(x0 + 1, mask.width - 1);
    const double ly = y - double(y0), lx = x - double(x0);
    return (1 - ly) * ((1 - lx) * mask.at(y0, x0) + lx * mask.at(y0, x1)) +
           ly * ((1 - lx) * mask.at(y1, x0) + lx * mask.at(y1, x1));
  };
  for (std::size_t i = 0; i < out_h; ++i) {
    for (std::size_t j = 0; j < out_w; ++j) {
      const double y = box.y1 + (double(i) + 0.5) * box.height() / double(out_h);
      const double x = box.x1 + (double(j) + 0.5) * box.width() / double(out_w);
      out[i * out_w + j] = value(y, x) >= 0.5 ? 1 : 0;
    }
  }
  return out;
}

// Classification, regression and mask targets for a set of sampled boxes.
struct RoiTargets {
  std::vector<std::size_t> labels;                      // one per box
  std::vector<std::size_t> foreground;                  // positions into the box list
  std::vector<BoxDelta> reg_targets;                    // one per foreground
  std::vector<std::vector<std::uint8_t>> mask_targets;  // one per foreground when masks are on
};

inline RoiTargets build_targets(std::span<const Box> boxes, std::span<const ProposalMatch> matches,
                                std::span<const Instance> gts, bool with_masks, std::size_t mask_h,
                                std::size_t mask_w) {
  if (boxes.size() != matches.size()) throw std::invalid_argument("build_targets: one match per box required");
  RoiTargets t;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    t.labels.push_back(matches[i].foreground ? matches[i].label : 0);
    if (!matches[i].foreground) continue;
    const Instance& gt = gts[static_cast<std::size_t>(matches[i].gt)];
    t.foreground.push_back(i);
    t.reg_targets.push_back(encode(boxes[i], gt.box));
    if (with_masks) {
      if (gt.mask.data.empty()) throw std::invalid_argument("build_targets: foreground gt has no mask");
      t.mask_targets.push_back(crop_mask_target(gt.mask, boxes[i], mask_h, mask_w));
    }
  }
  return t;
}

}  // namespace dsfpn
