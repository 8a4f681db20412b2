#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsfpn/dataset.hpp"
#include "dsfpn/metrics.hpp"
#include "dsfpn/model.hpp"

namespace dsfpn {

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t iterations = 2000;
  std::size_t lr_decay_at = 1500;
  double lr_decay = 0.1;
  std::size_t batch_size = 2;
  std::size_t roi_batch = 32;
  double fg_fraction = 0.25;
  std::uint64_t seed = 0;
  std::size_t eval_interval = 250;  // 0: evaluate only after the last iteration
  std::size_t train_eval_subsample = 100;

  void validate() const {
    if (!(lr > 0)) throw std::invalid_argument("train.lr must be positive");
    if (momentum < 0 || momentum >= 1) throw std::invalid_argument("train.momentum must lie in [0, 1)");
    if (weight_decay < 0) throw std::invalid_argument("train.weight_decay must be non-negative");
    if (!(lr_decay > 0)) throw std::invalid_argument("train.lr_decay must be positive");
    if (batch_size == 0) throw std::invalid_argument("train.batch_size must be positive");
    if (roi_batch == 0) throw std::invalid_argument("train.roi_batch must be positive");
    if (fg_fraction < 0 || fg_fraction > 1) throw std::invalid_argument("train.fg_fraction must lie in [0, 1]");
  }

  double lr_at(std::size_t iteration) const { return iteration >= lr_decay_at ? lr * lr_decay : lr; }
  SamplingConfig sampling() const { return {roi_batch, fg_fraction}; }
};

template <class T>
struct SgdState {
  std::map<std::string, std::vector<T>> velocity;
};

inline bool is_bias(const std::string& name) {
  return name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
}

// v <- momentum·v + g + wd·p (no decay on biases); p <- p − lr·v. Parameters without a gradient are skipped.
// All gradients are checked before anything is updated, so a failure leaves the parameters untouched.
template <class T>
void sgd_step(ParamSet<T>& params, double lr, double momentum, double weight_decay, SgdState<T>& state) {
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (T g : p.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + name + "'");
    }
  }
  for (auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    auto& v = state.velocity[name];
    if (v.empty()) v.assign(p.numel(), T(0));
    const double wd = is_bias(name) ? 0.0 : weight_decay;
    auto data = p.mutable_data();
    const auto grad = p.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      v[i] = static_cast<T>(momentum * v[i] + grad[i] + wd * data[i]);
      data[i] = static_cast<T>(data[i] - lr * v[i]);
    }
  }
}

template <class T>
void sgd_step(ParamSet<T>& params, const TrainConfig& cfg, std::size_t iteration, SgdState<T>& state) {
  sgd_step(params, cfg.lr_at(iteration), cfg.momentum, cfg.weight_decay, state);
}

// ---- evaluation ----

template <class T>
std::vector<EvalDetection> predict(const std::vector<const Sample*>& samples, const ModelConfig& cfg,
                                   const ParamSet<T>& params) {
  std::vector<EvalDetection> out;
  for (const auto* s : samples) {
    for (auto& d : forward_infer(s->image, cfg, params)) {
      out.push_back({s->image_id, d.label, d.box, d.score, std::move(d.mask)});
    }
  }
  return out;
}

inline EvalReport evaluate_detections(std::span<const EvalDetection> dets, std::span<const EvalGroundTruth> gts,
                                      bool with_masks) {
  const auto thresholds = coco_iou_thresholds();
  EvalReport r;
  r.bbox = evaluate_ap(dets, gts, thresholds);
  if (with_masks) r.mask = evaluate_mask_ap(dets, gts, thresholds);
  return r;
}

template <class T>
EvalReport evaluate_model(const std::vector<const Sample*>& samples, const ModelConfig& cfg, const ParamSet<T>& params) {
  const auto dets = predict(samples, cfg, params);
  const auto gts = ground_truth_of(samples);
  return evaluate_detections(dets, gts, cfg.with_masks);
}

// Fixed seeded subset of at most n samples, in dataset order.
inline std::vector<const Sample*> subsample(const std::vector<const Sample*>& samples, std::size_t n,
                                            std::uint64_t seed) {
  if (samples.size() <= n) return samples;
  std::vector<std::size_t> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  std::vector<const Sample*> out;
  for (auto i : idx) out.push_back(samples[i]);
  return out;
}

// ---- training loop ----

struct EvalPoint {
  std::size_t iteration = 0;
  ApMetrics train;
  ApMetrics val;
};

struct LogRow {
  std::size_t iteration = 0;  // 1-based: the row after the iteration-th update
  std::vector<std::pair<std::string, double>> terms;
  double total = 0;
  double lr = 0;
  bool skipped = false;
  std::optional<EvalPoint> eval;
};

class TrainingDiverged : public NumericError {
 public:
  using NumericError::NumericError;
};

template <class T>
struct TrainResult {
  ParamSet<T> params;
  ParamSet<T> best;  // highest validation AP50 seen at an eval row; the final weights without validation data
  double best_val_ap50 = -1;
  std::vector<LogRow> log;
  std::vector<EvalPoint> evals;
};

template <class T>
struct TrainHooks {
  std::function<void(const LogRow&)> on_row;
  // Called with the last parameters that produced finite values before a divergence is reported.
  std::function<void(const ParamSet<T>&)> on_diverged;
};

// Iterations at which the model is evaluated: every multiple of the interval, plus the last iteration.
inline std::vector<std::size_t> eval_schedule(std::size_t iterations, std::size_t interval) {
  std::vector<std::size_t> out;
  if (interval > 0) {
    for (std::size_t i = interval; i <= iterations; i += interval) out.push_back(i);
  }
  if (iterations > 0 && (out.empty() || out.back() != iterations)) out.push_back(iterations);
  return out;
}

template <class T>
TrainResult<T> train(const ModelConfig& model_cfg, const TrainConfig& cfg, const std::vector<const Sample*>& train_set,
                     const std::vector<const Sample*>& val_set, const TrainHooks<T>& hooks = {},
                     std::optional<ParamSet<T>> init = std::nullopt) {
  model_cfg.validate();
  cfg.validate();
  std::vector<const Sample*> pool;
  for (const auto* s : train_set) {
    if (!s->instances.empty()) pool.push_back(s);
  }
  if (pool.empty()) throw std::invalid_argument("train: dataset has no annotated images");

  TrainResult<T> result;
  result.params = init ? std::move(*init) : init_params<T>(model_cfg, cfg.seed);
  std::mt19937_64 rng(cfg.seed);
  const auto train_eval = subsample(train_set, cfg.train_eval_subsample, cfg.seed ^ 0x5bd1e995ull);
  const auto schedule = eval_schedule(cfg.iterations, cfg.eval_interval);
  SgdState<T> state;
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  const SamplingConfig sampling = cfg.sampling();

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    std::vector<const Sample*> batch;
    while (batch.size() < cfg.batch_size) {
      if (cursor == order.size()) {
        order.resize(pool.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(pool[order[cursor++]]);
    }

    LogRow row;
    row.iteration = it + 1;
    row.lr = cfg.lr_at(it);
    try {
      result.params.zero_grad();
      auto out = forward_train(batch, model_cfg, result.params, sampling, rng);
      if (out.skip) {
        row.skipped = true;
      } else {
        auto loss = compute_loss(out, model_cfg);
        for (const auto& t : loss.terms) row.terms.emplace_back(t.name, static_cast<double>(t.value.item()));
        row.total = static_cast<double>(loss.total.item());
        backward(loss.total);
        sgd_step(result.params, cfg, it, state);
      }
    } catch (const NumericError& e) {
      if (hooks.on_diverged) hooks.on_diverged(result.params);
      throw TrainingDiverged("training diverged at iteration " + std::to_string(it + 1) + ": " + e.what());
    }

    if (std::binary_search(schedule.begin(), schedule.end(), it + 1)) {
      EvalPoint p;
      p.iteration = it + 1;
      p.train = evaluate_model(train_eval, model_cfg, result.params).bbox;
      if (!val_set.empty()) p.val = evaluate_model(val_set, model_cfg, result.params).bbox;
      if (!val_set.empty() && p.val.ap50 > result.best_val_ap50) {
        result.best_val_ap50 = p.val.ap50;
        result.best = result.params.clone();
      }
      row.eval = p;
      result.evals.push_back(p);
    }
    if (hooks.on_row) hooks.on_row(row);
    result.log.push_back(std::move(row));
  }
  if (result.best.size() == 0) result.best = result.params.clone();
  return result;
}

// Training log as CSV: iteration, loss terms, L_final, lr, then AP columns filled on eval rows only.
inline std::string log_csv(const std::vector<LogRow>& log) {
  std::vector<std::string> names;
  for (const auto& r : log) {
    for (const auto& [n, _] : r.terms) {
      if (std::find(names.begin(), names.end(), n) == names.end()) names.push_back(n);
    }
  }
  std::ostringstream os;
  os << std::setprecision(10);
  os << "iteration";
  for (const auto& n : names) os << ',' << n;
  os << ",L_final,lr,train_ap,train_ap50,val_ap,val_ap50\n";
  for (const auto& r : log) {
    os << r.iteration;
    for (const auto& n : names) {
      os << ',';
      for (const auto& [tn, v] : r.terms) {
        if (tn == n) os << v;
      }
    }
    os << ',';
    if (!r.skipped) os << r.total;
    os << ',' << r.lr;
    if (r.eval) {
      os << ',' << r.eval->train.ap << ',' << r.eval->train.ap50 << ',' << r.eval->val.ap << ',' << r.eval->val.ap50;
    } else {
      os << ",,,,";
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace dsfpn
