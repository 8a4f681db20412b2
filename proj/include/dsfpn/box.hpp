#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace dsfpn {

// Axis-aligned box in continuous pixel coordinates, no "+1" convention.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return x1 + 0.5 * width(); }
  double cy() const { return y1 + 0.5 * height(); }
  bool valid() const { return x2 >= x1 && y2 >= y1; }
  bool operator==(const Box&) const = default;
};

// Center offsets in units of the reference size, log size ratios.
struct BoxDelta {
  double dx = 0, dy = 0, dw = 0, dh = 0;
  bool operator==(const BoxDelta&) const = default;
};

struct ImageSize {
  double width = 0, height = 0;
};

// dw, dh clamp applied on decode.
inline const double kDeltaScaleClamp = std::log(1000.0 / 16.0);

inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline Box clip(const Box& b, ImageSize size) {
  auto c = [](double v, double hi) { return std::clamp(v, 0.0, hi); };
  return {c(b.x1, size.width), c(b.y1, size.height), c(b.x2, size.width), c(b.y2, size.height)};
}

// Indices sorted by descending score; equal scores keep ascending index order.
inline std::vector<std::size_t> score_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

// Greedy NMS: a box is dropped when its IoU with an already kept box exceeds the threshold.
inline std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores, double iou_threshold) {
  if (boxes.size() != scores.size()) throw std::invalid_argument("nms: boxes and scores differ in length");
  std::vector<std::size_t> keep;
  std::vector<char> suppressed(boxes.size(), 0);
  for (std::size_t i : score_order(scores)) {
    if (suppressed[i]) continue;
    keep.push_back(i);
    for (std::size_t j = 0; j < boxes.size(); ++j) {
      if (!suppressed[j] && j != i && iou(boxes[i], boxes[j]) > iou_threshold) suppressed[j] = 1;
    }
  }
  return keep;
}

inline BoxDelta encode(const Box& anchor, const Box& gt) {
  const double aw = anchor.width(), ah = anchor.height();
  if (aw <= 0 || ah <= 0) throw std::invalid_argument("encode: anchor must have positive width and height");
  if (gt.width() <= 0 || gt.height() <= 0) throw std::invalid_argument("encode: target must have positive size");
  return {(gt.cx() - anchor.cx()) / aw, (gt.cy() - anchor.cy()) / ah, std::log(gt.width() / aw),
          std::log(gt.height() / ah)};
}

inline Box decode(const Box& anchor, const BoxDelta& d, std::optional<ImageSize> image = std::nullopt) {
  const double aw = anchor.width(), ah = anchor.height();
  if (aw <= 0 || ah <= 0) throw std::invalid_argument("decode: anchor must have positive width and height");
  const double cx = anchor.cx() + d.dx * aw;
  const double cy = anchor.cy() + d.dy * ah;
  const double w = aw * std::exp(std::min(d.dw, kDeltaScaleClamp));
  const double h = ah * std::exp(std::min(d.dh, kDeltaScaleClamp));
  Box out{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  return image ? clip(out, *image) : out;
}

// Expands a box about its center until both sides are at least min_side, staying inside the image.
inline Box ensure_min_size(Box b, double min_side, ImageSize image) {
  auto widen = [&](double& lo, double& hi, double limit) {
    if (hi - lo >= min_side) return;
    const double c = 0.5 * (lo + hi);
    lo = c - 0.5 * min_side;
    hi = c + 0.5 * min_side;
    if (lo < 0) { hi -= lo; lo = 0; }
    if (hi > limit) { lo -= hi - limit; hi = limit; }
    lo = std::max(lo, 0.0);
  };
  widen(b.x1, b.x2, image.width);
  widen(b.y1, b.y2, image.height);
  return b;
}

}  // namespace dsfpn
