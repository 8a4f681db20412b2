#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsfpn/box.hpp"
#include "dsfpn/ops.hpp"
#include "dsfpn/tensor.hpp"

namespace dsfpn {

struct RoiConfig {
  std::size_t output_h = 4;
  std::size_t output_w = 4;
  std::size_t sampling_ratio = 2;  // samples per bin along each axis
};

// A box to pool, with the image in the batch and the pyramid level it reads from.
struct RoiRef {
  std::size_t image = 0;
  std::size_t level = 0;
  Box box;
};

namespace detail {

struct BilinearTap {
  std::size_t offset;  // within one H×W plane
  double weight;
};

// Bilinear taps with coordinates clamped to [0, size−1] on both axes.
inline void bilinear_taps(double y, double x, std::size_t h, std::size_t w, double scale,
                          std::vector<BilinearTap>& taps) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double ly = y - static_cast<double>(y0), lx = x - static_cast<double>(x0);
  taps.push_back({y0 * w + x0, scale * (1 - ly) * (1 - lx)});
  taps.push_back({y0 * w + x1, scale * (1 - ly) * lx});
  taps.push_back({y1 * w + x0, scale * ly * (1 - lx)});
  taps.push_back({y1 * w + x1, scale * ly * lx});
}

// Per-roi sampling plan: taps_per_bin taps for each of oh·ow bins.
struct RoiPlan {
  std::size_t plane_base = 0;  // offset of (image, channel 0) in the level tensor
  std::size_t level = 0;
  std::size_t plane = 0;  // H·W of the level
  std::vector<BilinearTap> taps;
};

inline RoiPlan plan_roi(const Box& box, std::size_t stride, std::size_t h, std::size_t w, const RoiConfig& cfg) {
  if (!(box.width() > 0) || !(box.height() > 0)) throw std::invalid_argument("roi_align: degenerate box");
  if (cfg.output_h == 0 || cfg.output_w == 0 || cfg.sampling_ratio == 0) {
    throw std::invalid_argument("roi_align: output size and sampling ratio must be positive");
  }
  const double s = static_cast<double>(stride);
  const double y0 = box.y1 / s - 0.5, x0 = box.x1 / s - 0.5;
  const double bin_h = box.height() / s / static_cast<double>(cfg.output_h);
  const double bin_w = box.width() / s / static_cast<double>(cfg.output_w);
  const std::size_t sr = cfg.sampling_ratio;
  const double scale = 1.0 / static_cast<double>(sr * sr);
  RoiPlan plan;
  plan.plane = h * w;
  plan.taps.reserve(cfg.output_h * cfg.output_w * sr * sr * 4);
  for (std::size_t py = 0; py < cfg.output_h; ++py) {
    for (std::size_t px = 0; px < cfg.output_w; ++px) {
      for (std::size_t iy = 0; iy < sr; ++iy) {
        const double y = y0 + (static_cast<double>(py) + (static_cast<double>(iy) + 0.5) / static_cast<double>(sr)) * bin_h;
        for (std::size_t ix = 0; ix < sr; ++ix) {
          const double x =
              x0 + (static_cast<double>(px) + (static_cast<double>(ix) + 0.5) / static_cast<double>(sr)) * bin_w;
          bilinear_taps(y, x, h, w, scale, plan.taps);
        }
      }
    }
  }
  return plan;
}

}  // namespace detail

// Pools every roi from its assigned level of a batched pyramid. Output n×C×oh×ow in roi order.
// Differentiable with respect to the feature maps only.
template <class T>
Tensor<T> roi_align_levels(const std::vector<Tensor<T>>& levels, std::span<const RoiRef> rois,
                           std::span<const std::size_t> strides, const RoiConfig& cfg) {
  if (levels.empty() || levels.size() != strides.size()) {
    throw DimensionError("roi_align: one stride per level required");
  }
  const std::size_t channels = levels[0].dim(1);
  for (const auto& l : levels) {
    if (l.rank() != 4 || l.dim(1) != channels) throw DimensionError("roi_align: levels must be NCHW with equal C");
  }
  const std::size_t bins = cfg.output_h * cfg.output_w;
  auto plans = std::make_shared<std::vector<detail::RoiPlan>>();
  plans->reserve(rois.size());
  for (const auto& r : rois) {
    if (r.level >= levels.size()) throw std::out_of_range("roi_align: level index out of range");
    const auto& f = levels[r.level];
    if (r.image >= f.dim(0)) throw std::out_of_range("roi_align: image index out of range");
    auto plan = detail::plan_roi(r.box, strides[r.level], f.dim(2), f.dim(3), cfg);
    plan.level = r.level;
    plan.plane_base = r.image * channels * plan.plane;
    plans->push_back(std::move(plan));
  }

  std::vector<T> out(rois.size() * channels * bins);
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const auto& plan = (*plans)[r];
    const std::size_t per_bin = plan.taps.size() / bins;
    const T* src = levels[plan.level].data().data() + plan.plane_base;
    for (std::size_t c = 0; c < channels; ++c) {
      const T* fp = src + c * plan.plane;
      T* op = out.data() + (r * channels + c) * bins;
      for (std::size_t b = 0; b < bins; ++b) {
        double acc = 0;
        for (std::size_t t = b * per_bin; t < (b + 1) * per_bin; ++t) acc += plan.taps[t].weight * fp[plan.taps[t].offset];
        op[b] = static_cast<T>(acc);
      }
    }
  }

  std::vector<std::shared_ptr<detail::Node<T>>> inputs;
  for (const auto& l : levels) inputs.push_back(l.node());
  return detail::make_result<T>(
      "roi_align", {rois.size(), channels, cfg.output_h, cfg.output_w}, std::move(out), inputs,
      [inputs, plans, channels, bins](detail::Node<T>& self) {
        for (std::size_t r = 0; r < plans->size(); ++r) {
          const auto& plan = (*plans)[r];
          auto& level = *inputs[plan.level];
          if (!level.requires_grad) continue;
          const std::size_t per_bin = plan.taps.size() / bins;
          T* dst = level.grad_buffer().data() + plan.plane_base;
          for (std::size_t c = 0; c < channels; ++c) {
            T* gp = dst + c * plan.plane;
            const T* go = self.grad.data() + (r * channels + c) * bins;
            for (std::size_t b = 0; b < bins; ++b) {
              for (std::size_t t = b * per_bin; t < (b + 1) * per_bin; ++t) {
                gp[plan.taps[t].offset] += static_cast<T>(plan.taps[t].weight) * go[b];
              }
            }
          }
        }
      });
}

// Single-map form: feature 1×C×H×W, box in image coordinates -> C×oh×ow.
template <class T>
Tensor<T> roi_align(const Tensor<T>& feature, const Box& box, std::size_t stride, const RoiConfig& cfg) {
  if (feature.rank() != 4 || feature.dim(0) != 1) throw DimensionError("roi_align expects a 1×C×H×W feature map");
  const RoiRef ref{0, 0, box};
  const std::size_t strides[] = {stride};
  auto pooled = roi_align_levels<T>({feature}, std::span<const RoiRef>(&ref, 1), strides, cfg);
  return ops::reshape(pooled, {feature.dim(1), cfg.output_h, cfg.output_w});
}

}  // namespace dsfpn
