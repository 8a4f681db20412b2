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

namespace dsfpn {

struct PyramidConfig {
  std::size_t num_levels = 4;
  std::vector<std::size_t> backbone_channels{16, 32, 64, 128};
  std::size_t out_channels = 32;
  std::vector<std::size_t> level_strides{2, 4, 8, 16};
  int assign_k0 = 2;
  double assign_scale = 16.0;

  void validate() const {
    if (num_levels == 0) throw std::invalid_argument("pyramid.num_levels must be positive");
    if (level_strides.size() != num_levels) {
      throw std::invalid_argument("pyramid.level_strides must list num_levels strides");
    }
    if (backbone_channels.size() != num_levels) {
      throw std::invalid_argument("pyramid.backbone_channels must list num_levels widths");
    }
    if (level_strides[0] != 2) throw std::invalid_argument("pyramid.level_strides must start at 2");
    for (std::size_t k = 1; k < num_levels; ++k) {
      if (level_strides[k] != 2 * level_strides[k - 1]) {
        throw std::invalid_argument("pyramid.level_strides must double at every level");
      }
    }
    if (out_channels == 0 || assign_scale <= 0) throw std::invalid_argument("pyramid widths and scales must be positive");
  }
};

template <class T>
struct FeaturePyramid {
  std::vector<Tensor<T>> bottom_up;  // fine -> coarse
  std::vector<Tensor<T>> top_down;   // fine -> coarse, out_channels each
};

// Pyramid level for a box: k0 + floor(log2(sqrt(area) / s0)), clamped to the available levels.
inline std::size_t assign_level(const Box& box, const PyramidConfig& cfg) {
  const double area = box.width() * box.height();
  if (!(box.width() > 0) || !(box.height() > 0)) throw std::invalid_argument("assign_level: zero-area box");
  const double k = cfg.assign_k0 + std::floor(std::log2(std::sqrt(area) / cfg.assign_scale));
  return static_cast<std::size_t>(std::clamp(k, 0.0, static_cast<double>(cfg.num_levels - 1)));
}

namespace names {
inline std::string backbone_conv(std::size_t level, int which) {
  return "backbone.stage" + std::to_string(level) + ".conv" + std::to_string(which);
}
inline std::string fpn_lateral(std::size_t level) { return "fpn.lateral" + std::to_string(level); }
inline std::string fpn_smooth(std::size_t level) { return "fpn.smooth" + std::to_string(level); }
inline std::string aux_lateral(std::size_t level) { return "aux.lateral" + std::to_string(level); }
}  // namespace names

template <class T>
void init_backbone(ParamSet<T>& params, const PyramidConfig& cfg, std::mt19937_64& rng) {
  std::size_t in = 3;
  for (std::size_t k = 0; k < cfg.num_levels; ++k) {
    const std::size_t c = cfg.backbone_channels[k];
    init::conv(params, names::backbone_conv(k, 1), c, in, 3, rng);
    init::conv(params, names::backbone_conv(k, 2), c, c, 3, rng);
    in = c;
  }
}

template <class T>
void init_top_down(ParamSet<T>& params, const PyramidConfig& cfg, std::mt19937_64& rng) {
  for (std::size_t k = 0; k < cfg.num_levels; ++k) {
    init::conv(params, names::fpn_lateral(k), cfg.out_channels, cfg.backbone_channels[k], 1, rng);
    if (k + 1 < cfg.num_levels) init::conv(params, names::fpn_smooth(k), cfg.out_channels, cfg.out_channels, 3, rng);
  }
}

template <class T>
void init_aux_laterals(ParamSet<T>& params, const PyramidConfig& cfg, std::mt19937_64& rng) {
  for (std::size_t k = 0; k < cfg.num_levels; ++k) {
    init::conv(params, names::aux_lateral(k), cfg.out_channels, cfg.backbone_channels[k], 1, rng);
  }
}

namespace detail {
template <class T>
Tensor<T> conv_layer(const Tensor<T>& x, const ParamSet<T>& params, const std::string& name, std::size_t stride,
                     std::size_t pad) {
  return ops::conv2d(x, params.at(name + ".weight"), params.at(name + ".bias"), stride, pad);
}
}  // namespace detail

// Each stage: stride-2 3×3 conv, relu, 3×3 conv, relu.
template <class T>
std::vector<Tensor<T>> build_bottom_up(const Tensor<T>& image, const ParamSet<T>& params, const PyramidConfig& cfg) {
  if (image.rank() != 4 || image.dim(1) != 3) throw DimensionError("backbone expects N×3×H×W images");
  const std::size_t largest = cfg.level_strides.back();
  if (image.dim(2) % largest != 0 || image.dim(3) % largest != 0) {
    throw DimensionError("image size " + std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(3)) +
                         " is not divisible by the largest stride " + std::to_string(largest));
  }
  std::vector<Tensor<T>> maps;
  Tensor<T> x = image;
  for (std::size_t k = 0; k < cfg.num_levels; ++k) {
    x = ops::relu(detail::conv_layer(x, params, names::backbone_conv(k, 1), 2, 1));
    x = ops::relu(detail::conv_layer(x, params, names::backbone_conv(k, 2), 1, 1));
    maps.push_back(x);
  }
  return maps;
}

// P_top = lateral(C_top); P_k = smooth(lateral(C_k) + upsample(P_{k+1})).
template <class T>
std::vector<Tensor<T>> build_top_down(const std::vector<Tensor<T>>& bottom_up, const ParamSet<T>& params,
                                      const PyramidConfig& cfg) {
  if (bottom_up.size() != cfg.num_levels) throw DimensionError("top-down pathway needs one map per level");
  std::vector<Tensor<T>> out(cfg.num_levels);
  const std::size_t top = cfg.num_levels - 1;
  out[top] = detail::conv_layer(bottom_up[top], params, names::fpn_lateral(top), 1, 0);
  for (std::size_t k = top; k-- > 0;) {
    auto lateral = detail::conv_layer(bottom_up[k], params, names::fpn_lateral(k), 1, 0);
    auto merged = ops::add(lateral, ops::nearest_upsample2x(out[k + 1]));
    out[k] = detail::conv_layer(merged, params, names::fpn_smooth(k), 1, 1);
  }
  return out;
}

// 1×1 projections of the bottom-up maps to the pyramid width, feeding the auxiliary heads.
template <class T>
std::vector<Tensor<T>> project_bottom_up(const std::vector<Tensor<T>>& bottom_up, const ParamSet<T>& params,
                                         const PyramidConfig& cfg) {
  std::vector<Tensor<T>> out;
  for (std::size_t k = 0; k < cfg.num_levels; ++k) {
    out.push_back(detail::conv_layer(bottom_up[k], params, names::aux_lateral(k), 1, 0));
  }
  return out;
}

}  // namespace dsfpn
