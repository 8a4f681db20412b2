#pragma once

#include <cstddef>
#include <random>
#include <stdexcept>
#include <string>

#include "dsfpn/ops.hpp"
#include "dsfpn/params.hpp"
#include "dsfpn/pyramid.hpp"

namespace dsfpn {

enum class HeadMode { kCoupled, kDecoupled };

struct HeadConfig {
  HeadMode mode = HeadMode::kCoupled;
  std::size_t in_features = 512;  // C·h·w of the pooled roi feature
  std::size_t hidden_width = 128;
  std::size_t num_classes = 3;     // foreground classes; the classifier adds background at index 0
  bool halve_decoupled_width = false;
  double init_std = 0.01;

  std::size_t tower_width() const {
    return mode == HeadMode::kDecoupled && halve_decoupled_width ? hidden_width / 2 : hidden_width;
  }
};

template <class T>
struct HeadOutput {
  Tensor<T> cls_logits;  // n×(K+1)
  Tensor<T> reg_deltas;  // n×4, class agnostic
};

template <class T>
void init_detection_head(ParamSet<T>& params, const std::string& prefix, const HeadConfig& cfg, std::mt19937_64& rng) {
  const std::size_t w = cfg.tower_width();
  if (cfg.mode == HeadMode::kCoupled) {
    init::linear(params, prefix + ".fc1", w, cfg.in_features, cfg.init_std, rng);
    init::linear(params, prefix + ".fc2", w, w, cfg.init_std, rng);
  } else {
    init::linear(params, prefix + ".cls_fc1", w, cfg.in_features, cfg.init_std, rng);
    init::linear(params, prefix + ".cls_fc2", w, w, cfg.init_std, rng);
    init::linear(params, prefix + ".reg_fc1", w, cfg.in_features, cfg.init_std, rng);
    init::linear(params, prefix + ".reg_fc2", w, w, cfg.init_std, rng);
  }
  init::linear(params, prefix + ".cls", cfg.num_classes + 1, w, cfg.init_std, rng);
  init::linear(params, prefix + ".reg", 4, w, cfg.init_std, rng);
}

namespace detail {
template <class T>
Tensor<T> dense(const Tensor<T>& x, const ParamSet<T>& params, const std::string& name) {
  return ops::linear(x, params.at(name + ".weight"), params.at(name + ".bias"));
}

template <class T>
Tensor<T> flatten_rows(const Tensor<T>& pooled) {
  if (pooled.rank() < 2) throw DimensionError("head input must be n×C×h×w");
  return ops::reshape(pooled, {pooled.dim(0), pooled.numel() / pooled.dim(0)});
}
}  // namespace detail

// Shared two-layer trunk feeding sibling classification and regression outputs.
template <class T>
HeadOutput<T> coupled_forward(const Tensor<T>& pooled, const ParamSet<T>& params, const std::string& prefix) {
  if (!params.contains(prefix + ".fc1.weight")) throw std::invalid_argument("head '" + prefix + "' is not coupled");
  auto f = detail::flatten_rows(pooled);
  auto h = ops::relu(detail::dense(f, params, prefix + ".fc1"));
  h = ops::relu(detail::dense(h, params, prefix + ".fc2"));
  return {detail::dense(h, params, prefix + ".cls"), detail::dense(h, params, prefix + ".reg")};
}

// Independent two-layer towers; the two outputs share nothing above the pooled feature.
template <class T>
HeadOutput<T> decoupled_forward(const Tensor<T>& pooled, const ParamSet<T>& params, const std::string& prefix) {
  if (!params.contains(prefix + ".cls_fc1.weight")) throw std::invalid_argument("head '" + prefix + "' is not decoupled");
  auto f = detail::flatten_rows(pooled);
  auto c = ops::relu(detail::dense(f, params, prefix + ".cls_fc1"));
  c = ops::relu(detail::dense(c, params, prefix + ".cls_fc2"));
  auto r = ops::relu(detail::dense(f, params, prefix + ".reg_fc1"));
  r = ops::relu(detail::dense(r, params, prefix + ".reg_fc2"));
  return {detail::dense(c, params, prefix + ".cls"), detail::dense(r, params, prefix + ".reg")};
}

template <class T>
HeadOutput<T> detection_head_forward(const Tensor<T>& pooled, const ParamSet<T>& params, const std::string& prefix,
                                     HeadMode mode) {
  return mode == HeadMode::kCoupled ? coupled_forward(pooled, params, prefix) : decoupled_forward(pooled, params, prefix);
}

template <class T>
void init_mask_head(ParamSet<T>& params, const std::string& prefix, std::size_t in_channels, std::size_t width,
                    std::size_t num_classes, std::mt19937_64& rng) {
  init::conv(params, prefix + ".conv1", width, in_channels, 3, rng);
  init::conv(params, prefix + ".conv2", width, width, 3, rng);
  init::conv(params, prefix + ".out", num_classes, width, 1, rng);
}

// Two 3×3 convs, 2× nearest upsampling, 1×1 conv to one logit map per class: n×K×2h×2w.
template <class T>
Tensor<T> mask_forward(const Tensor<T>& pooled, const ParamSet<T>& params, const std::string& prefix) {
  auto x = ops::relu(detail::conv_layer(pooled, params, prefix + ".conv1", 1, 1));
  x = ops::relu(detail::conv_layer(x, params, prefix + ".conv2", 1, 1));
  return detail::conv_layer(ops::nearest_upsample2x(x), params, prefix + ".out", 1, 0);
}

}  // namespace dsfpn
