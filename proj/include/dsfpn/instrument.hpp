#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsfpn/dataset.hpp"
#include "dsfpn/model.hpp"
#include "dsfpn/training.hpp"

namespace dsfpn {

// ---- gradient-norm probe ----

struct GradProbeReport {
  std::string config_id;
  std::size_t batches = 0;
  std::map<std::string, double> layer_norms;  // layer -> mean over batches of L2(grad) / sqrt(#params)

  double at(const std::string& layer) const {
    auto it = layer_norms.find(layer);
    if (it == layer_norms.end()) throw std::out_of_range("probe has no layer '" + layer + "'");
    return it->second;
  }
};

inline std::string config_id(const ModelConfig& cfg) {
  std::ostringstream os;
  os << "ds=" << (cfg.ds_enabled ? "on" : "off") << ",dc=" << (cfg.dc_enabled ? "on" : "off")
     << ",stages=" << cfg.num_stages << ",masks=" << (cfg.with_masks ? "on" : "off");
  return os.str();
}

// Layer name of a parameter: the name without its .weight / .bias suffix.
inline std::string layer_of(const std::string& param) {
  const auto dot = param.rfind('.');
  return dot == std::string::npos ? param : param.substr(0, dot);
}

// Forward + backward on each batch without touching the weights. Sampling is seeded once per probe, so two
// configs probed with the same seed see the same boxes. Layers whose parameters are frozen report 0.
template <class T>
GradProbeReport grad_probe(const ModelConfig& cfg, const ParamSet<T>& weights,
                           const std::vector<std::vector<const Sample*>>& batches, const SamplingConfig& sampling,
                           std::uint64_t seed) {
  GradProbeReport report;
  report.config_id = config_id(cfg);
  ParamSet<T> params;
  for (const auto& [name, t] : weights) {
    auto copy = t.detach();
    params.add(name, copy);
    if (!t.requires_grad()) params.at(name).set_requires_grad(false);
  }
  std::map<std::string, std::size_t> counts;
  for (const auto& [name, t] : params) {
    counts[layer_of(name)] += t.numel();
    report.layer_norms[layer_of(name)] = 0.0;
  }
  std::mt19937_64 rng(seed);
  for (const auto& batch : batches) {
    params.zero_grad();
    auto out = forward_train(batch, cfg, params, sampling, rng);
    if (out.skip) continue;
    backward(compute_loss(out, cfg).total);
    std::map<std::string, double> sq;
    for (const auto& [name, t] : params) {
      double s = 0;
      if (t.has_grad()) {
        for (T g : t.grad()) s += double(g) * double(g);
      }
      sq[layer_of(name)] += s;
    }
    for (const auto& [layer, s] : sq) report.layer_norms[layer] += std::sqrt(s) / std::sqrt(double(counts[layer]));
    ++report.batches;
  }
  if (report.batches) {
    for (auto& [_, v] : report.layer_norms) v /= double(report.batches);
  }
  return report;
}

inline nlohmann::json to_json(const GradProbeReport& r) {
  return {{"config", r.config_id}, {"batches", r.batches}, {"layer_norms", r.layer_norms}};
}

// Consecutive batches of `batch_size` drawn from a seeded shuffle of the annotated samples.
inline std::vector<std::vector<const Sample*>> probe_batches(const std::vector<const Sample*>& samples,
                                                             std::size_t n, std::size_t batch_size,
                                                             std::uint64_t seed) {
  std::vector<const Sample*> pool;
  for (const auto* s : samples) {
    if (!s->instances.empty()) pool.push_back(s);
  }
  if (pool.empty() || batch_size == 0) throw std::invalid_argument("probe_batches: nothing to sample");
  std::mt19937_64 rng(seed);
  std::vector<std::vector<const Sample*>> out(n);
  std::size_t cursor = pool.size();
  for (auto& b : out) {
    while (b.size() < batch_size) {
      if (cursor == pool.size()) {
        std::shuffle(pool.begin(), pool.end(), rng);
        cursor = 0;
      }
      b.push_back(pool[cursor++]);
    }
  }
  return out;
}

// ---- feature export ----

// Channel sum of a 1×C×H×W map, min-max scaled to 0..255. A constant map becomes all zeros.
template <class T>
std::vector<std::uint8_t> channel_sum_image(const Tensor<T>& map) {
  if (map.rank() != 4 || map.dim(0) != 1) throw DimensionError("channel_sum_image expects a 1×C×H×W map");
  const std::size_t c = map.dim(1), plane = map.dim(2) * map.dim(3);
  std::vector<double> sum(plane, 0.0);
  const auto d = map.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < plane; ++p) sum[p] += double(d[ch * plane + p]);
  }
  const auto [lo, hi] = std::minmax_element(sum.begin(), sum.end());
  const double range = *hi - *lo;
  std::vector<std::uint8_t> out(plane, 0);
  if (range > 0) {
    for (std::size_t p = 0; p < plane; ++p) out[p] = static_cast<std::uint8_t>(std::lround((sum[p] - *lo) / range * 255.0));
  }
  return out;
}

// Writes <prefix>_bottom_up<k>.pgm and <prefix>_top_down<k>.pgm for every level; returns the paths.
template <class T>
std::vector<std::string> export_feature_maps(const ModelConfig& cfg, const ParamSet<T>& params, const Image& image,
                                             const std::string& prefix) {
  NoGradGuard no_grad;
  const auto input = images_to_tensor<T>({&image});
  const auto bottom_up = build_bottom_up(input, params, cfg.pyramid);
  const auto top_down = build_top_down(bottom_up, params, cfg.pyramid);
  std::vector<std::string> paths;
  auto dump = [&](const std::vector<Tensor<T>>& maps, const std::string& tag) {
    for (std::size_t k = 0; k < maps.size(); ++k) {
      const std::string path = prefix + "_" + tag + std::to_string(k) + ".pgm";
      write_pgm(channel_sum_image(maps[k]), maps[k].dim(2), maps[k].dim(3), path);
      paths.push_back(path);
    }
  };
  dump(bottom_up, "bottom_up");
  dump(top_down, "top_down");
  return paths;
}

// ---- learning curves ----

using LearningCurve = std::vector<EvalPoint>;

// Trains with an evaluation every `interval` iterations on the fixed train subsample and the full val set.
template <class T>
LearningCurve learning_curve(const ModelConfig& model_cfg, TrainConfig train_cfg,
                             const std::vector<const Sample*>& train_set, const std::vector<const Sample*>& val_set,
                             std::size_t interval) {
  if (interval == 0 || train_cfg.iterations % interval != 0) {
    throw std::invalid_argument("learning_curve: interval must divide the number of iterations");
  }
  train_cfg.eval_interval = interval;
  return train<T>(model_cfg, train_cfg, train_set, val_set).evals;
}

inline std::string curve_csv(const std::vector<std::pair<std::string, LearningCurve>>& curves) {
  std::ostringstream os;
  os << std::setprecision(10) << "config,iteration,train_ap,train_ap50,val_ap,val_ap50\n";
  for (const auto& [name, curve] : curves) {
    for (const auto& p : curve) {
      os << name << ',' << p.iteration << ',' << p.train.ap << ',' << p.train.ap50 << ',' << p.val.ap << ','
         << p.val.ap50 << '\n';
    }
  }
  return os.str();
}

// First evaluated iteration whose validation AP50 reaches the threshold.
inline std::optional<std::size_t> iterations_to_reach(const LearningCurve& curve, double threshold) {
  for (const auto& p : curve) {
    if (p.val.ap50 >= threshold) return p.iteration;
  }
  return std::nullopt;
}

}  // namespace dsfpn
