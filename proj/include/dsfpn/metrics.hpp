#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "dsfpn/annotations.hpp"
#include "dsfpn/box.hpp"
#include "dsfpn/dataset.hpp"

namespace dsfpn {

// One scored prediction, tagged with the image it belongs to.
struct EvalDetection {
  int image_id = 0;
  int category = 0;
  Box box;
  double score = 0;
  Mask mask;  // image-sized, may be empty for box-only evaluation
};

struct EvalGroundTruth {
  int image_id = 0;
  int category = 0;
  Box box;
  Mask mask;
};

// Area thresholds for the small / medium / large breakdown, in square pixels.
struct SizeBuckets {
  double small_max = 16.0 * 16.0;
  double medium_max = 32.0 * 32.0;
};

struct ApMetrics {
  double ap = 0, ap50 = 0, ap75 = 0, ap_s = 0, ap_m = 0, ap_l = 0;
};

struct EvalReport {
  ApMetrics bbox;
  std::optional<ApMetrics> mask;
};

inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

inline double mask_iou(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width) throw std::invalid_argument("mask_iou: masks differ in size");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    inter += a.data[i] && b.data[i];
    uni += a.data[i] || b.data[i];
  }
  return uni ? double(inter) / double(uni) : 0.0;
}

// Nearest-neighbour resample onto an h×w grid.
inline Mask resample_mask(const Mask& m, std::size_t h, std::size_t w) {
  if (m.height == h && m.width == w) return m;
  Mask out(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      out.at(y, x) = m.at(std::min(m.height - 1, y * m.height / h), std::min(m.width - 1, x * m.width / w));
    }
  }
  return out;
}

namespace detail {

using Overlap = std::function<double(const EvalDetection&, const EvalGroundTruth&)>;

struct Scored {
  double score;
  bool tp;
};

// Average of interpolated precision at recall 0, 0.01, ..., 1. `scored` must be in ranking order.
inline double interpolated_ap(const std::vector<Scored>& scored, std::size_t num_gt) {
  if (num_gt == 0) return 0.0;
  std::vector<double> precision, recall;
  double tp = 0, fp = 0;
  for (const auto& s : scored) {
    (s.tp ? tp : fp) += 1;
    precision.push_back(tp / (tp + fp));
    recall.push_back(tp / double(num_gt));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double total = 0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    auto it = std::lower_bound(recall.begin(), recall.end(), level - 1e-12);
    if (it != recall.end()) total += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return total / 101.0;
}

// AP for one category at one IoU threshold. Ground truths outside [lo, hi) are ignored, and so are
// detections matched to them or unmatched detections outside the range.
inline std::pair<double, bool> category_ap(const std::vector<const EvalDetection*>& dets,
                                           const std::vector<const EvalGroundTruth*>& gts, double threshold,
                                           double lo, double hi, const Overlap& overlap, std::size_t max_per_image) {
  auto in_range = [&](double area) { return area >= lo && area < hi; };
  std::map<int, std::vector<const EvalGroundTruth*>> gt_by_image;
  std::map<int, std::vector<const EvalDetection*>> det_by_image;
  for (const auto* g : gts) gt_by_image[g->image_id].push_back(g);
  for (const auto* d : dets) det_by_image[d->image_id].push_back(d);

  std::size_t num_gt = 0;
  for (const auto* g : gts) num_gt += in_range(g->box.area());
  if (num_gt == 0) return {0.0, false};

  struct Entry {
    double score;
    std::size_t order;
    bool tp;
  };
  std::vector<Entry> entries;
  std::size_t order = 0;
  for (auto& [image, image_dets] : det_by_image) {
    std::stable_sort(image_dets.begin(), image_dets.end(), [](auto* a, auto* b) { return a->score > b->score; });
    if (image_dets.size() > max_per_image) image_dets.resize(max_per_image);
    auto image_gts = gt_by_image[image];
    // Non-ignored ground truths first.
    std::stable_sort(image_gts.begin(), image_gts.end(),
                     [&](auto* a, auto* b) { return in_range(a->box.area()) && !in_range(b->box.area()); });
    std::vector<char> taken(image_gts.size(), 0);
    for (const auto* d : image_dets) {
      double best = std::min(threshold, 1 - 1e-10);
      int match = -1;
      for (std::size_t g = 0; g < image_gts.size(); ++g) {
        if (taken[g]) continue;
        if (match >= 0 && in_range(image_gts[match]->box.area()) && !in_range(image_gts[g]->box.area())) break;
        const double v = overlap(*d, *image_gts[g]);
        if (v < best) continue;
        best = v;
        match = static_cast<int>(g);
      }
      bool ignore;
      if (match >= 0) {
        taken[match] = 1;
        ignore = !in_range(image_gts[match]->box.area());
      } else {
        ignore = !in_range(d->box.area());
      }
      if (!ignore) entries.push_back({d->score, order, match >= 0});
      ++order;
    }
  }
  std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    return a.score != b.score ? a.score > b.score : a.order < b.order;
  });
  std::vector<Scored> scored;
  for (const auto& e : entries) scored.push_back({e.score, e.tp});
  return {interpolated_ap(scored, num_gt), true};
}

// Mean over categories that have ground truth in range; 0 when none do.
inline double mean_ap(std::span<const EvalDetection> dets, std::span<const EvalGroundTruth> gts, double threshold,
                      double lo, double hi, const Overlap& overlap, std::size_t max_per_image) {
  std::map<int, std::vector<const EvalDetection*>> d;
  std::map<int, std::vector<const EvalGroundTruth*>> g;
  for (const auto& x : dets) d[x.category].push_back(&x);
  for (const auto& x : gts) g[x.category].push_back(&x);
  double total = 0;
  std::size_t counted = 0;
  for (const auto& [cat, cat_gts] : g) {
    auto [ap, valid] = category_ap(d[cat], cat_gts, threshold, lo, hi, overlap, max_per_image);
    if (!valid) continue;
    total += ap;
    ++counted;
  }
  return counted ? total / double(counted) : 0.0;
}

inline ApMetrics summarize(std::span<const EvalDetection> dets, std::span<const EvalGroundTruth> gts,
                           std::span<const double> thresholds, const SizeBuckets& buckets, const Overlap& overlap,
                           std::size_t max_per_image) {
  // Every (detection, gt) overlap is computed once and reused across thresholds and size ranges.
  std::unordered_map<const EvalDetection*, std::unordered_map<const EvalGroundTruth*, double>> memo;
  const Overlap cached = [&](const EvalDetection& d, const EvalGroundTruth& g) {
    auto& row = memo[&d];
    auto it = row.find(&g);
    if (it != row.end()) return it->second;
    return row[&g] = overlap(d, g);
  };
  auto averaged = [&](double lo, double hi) {
    if (thresholds.empty()) return 0.0;
    double s = 0;
    for (double t : thresholds) s += mean_ap(dets, gts, t, lo, hi, cached, max_per_image);
    return s / double(thresholds.size());
  };
  const double inf = std::numeric_limits<double>::infinity();
  ApMetrics m;
  m.ap = averaged(0, inf);
  m.ap50 = mean_ap(dets, gts, 0.5, 0, inf, cached, max_per_image);
  m.ap75 = mean_ap(dets, gts, 0.75, 0, inf, cached, max_per_image);
  m.ap_s = averaged(0, buckets.small_max);
  m.ap_m = averaged(buckets.small_max, buckets.medium_max);
  m.ap_l = averaged(buckets.medium_max, inf);
  return m;
}

}  // namespace detail

// Box AP, COCO protocol: greedy score-ordered matching per image and category, 101-point interpolation,
// mean over categories with ground truth. `thresholds` drives AP and the size breakdown; AP50 and AP75 are
// always at 0.5 and 0.75.
inline ApMetrics evaluate_ap(std::span<const EvalDetection> dets, std::span<const EvalGroundTruth> gts,
                             std::span<const double> thresholds, const SizeBuckets& buckets = {},
                             std::size_t max_per_image = 100) {
  return detail::summarize(dets, gts, thresholds, buckets,
                           [](const EvalDetection& d, const EvalGroundTruth& g) { return iou(d.box, g.box); },
                           max_per_image);
}

inline ApMetrics evaluate_ap(std::span<const EvalDetection> dets, std::span<const EvalGroundTruth> gts) {
  const auto t = coco_iou_thresholds();
  return evaluate_ap(dets, gts, t);
}

// Same protocol with mask IoU. Detection masks are resampled to the ground-truth grid when sizes differ;
// a detection without a mask overlaps nothing.
inline ApMetrics evaluate_mask_ap(std::span<const EvalDetection> dets, std::span<const EvalGroundTruth> gts,
                                  std::span<const double> thresholds, const SizeBuckets& buckets = {},
                                  std::size_t max_per_image = 100) {
  return detail::summarize(
      dets, gts, thresholds, buckets,
      [](const EvalDetection& d, const EvalGroundTruth& g) {
        if (d.mask.data.empty() || g.mask.data.empty()) return 0.0;
        return mask_iou(resample_mask(d.mask, g.mask.height, g.mask.width), g.mask);
      },
      max_per_image);
}

inline std::vector<EvalGroundTruth> ground_truth_of(const std::vector<const Sample*>& samples) {
  std::vector<EvalGroundTruth> out;
  for (const auto* s : samples) {
    for (const auto& inst : s->instances) out.push_back({s->image_id, inst.category, inst.box, inst.mask});
  }
  return out;
}

inline nlohmann::json to_json(const ApMetrics& m) {
  return {{"AP", m.ap}, {"AP50", m.ap50}, {"AP75", m.ap75}, {"AP_S", m.ap_s}, {"AP_M", m.ap_m}, {"AP_L", m.ap_l}};
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j{{"bbox", to_json(r.bbox)}};
  if (r.mask) j["segm"] = to_json(*r.mask);
  return j;
}

// Detection results file: [{image_id, category_id, bbox [x,y,w,h], score, segmentation?}].
inline nlohmann::json detections_to_json(std::span<const EvalDetection> dets, const Dataset& ds) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& d : dets) {
    nlohmann::json j{{"image_id", d.image_id},
                     {"category_id", ds.coco_category_id(d.category)},
                     {"bbox", to_xywh(d.box)},
                     {"score", d.score}};
    if (!d.mask.data.empty()) j["segmentation"] = {{"size", {d.mask.height, d.mask.width}}, {"counts", rle_encode(d.mask)}};
    out.push_back(std::move(j));
  }
  return out;
}

inline std::vector<EvalDetection> detections_from_json(const nlohmann::json& j, const Dataset& ds) {
  if (!j.is_array()) throw std::runtime_error("detections must be a JSON array");
  std::vector<EvalDetection> out;
  try {
    for (const auto& e : j) {
      EvalDetection d;
      d.image_id = e.at("image_id").get<int>();
      d.category = ds.category_index(e.at("category_id").get<int>());
      d.box = from_xywh(e.at("bbox").get<std::vector<double>>());
      d.score = e.at("score").get<double>();
      if (e.contains("segmentation")) {
        const auto& seg = e["segmentation"];
        const auto size = seg.at("size").get<std::vector<std::size_t>>();
        if (size.size() != 2) throw std::runtime_error("RLE size must be [height, width]");
        d.mask = rle_decode(seg.at("counts").get<std::vector<std::uint32_t>>(), size[0], size[1]);
      }
      out.push_back(std::move(d));
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("malformed detections: ") + e.what());
  }
  return out;
}

}  // namespace dsfpn
