#pragma once

#include <fstream>
#include <set>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "dsfpn/model.hpp"
#include "dsfpn/training.hpp"

namespace dsfpn {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

// Reads known keys from one JSON object and rejects anything else.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("field '" + path_ + "': expected an object");
  }

  template <class V>
  FieldReader& get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return *this;
    const auto& v = j_[key];
    const std::string where = "field '" + child(key) + "'";
    if constexpr (std::is_same_v<V, bool>) {
      if (!v.is_boolean()) throw ConfigError(where + ": expected true or false");
    } else if constexpr (std::is_integral_v<V>) {
      if (!v.is_number_integer() || (std::is_unsigned_v<V> && v.get<long long>() < 0)) {
        throw ConfigError(where + ": expected a non-negative integer");
      }
    } else if constexpr (std::is_floating_point_v<V>) {
      if (!v.is_number()) throw ConfigError(where + ": expected a number");
    } else {
      if (!v.is_array()) throw ConfigError(where + ": expected an array");
      for (const auto& e : v) {
        if (!e.is_number()) throw ConfigError(where + ": expected an array of numbers");
        if constexpr (std::is_integral_v<typename V::value_type>) {
          if (!e.is_number_integer() || e.get<long long>() < 0) {
            throw ConfigError(where + ": expected an array of non-negative integers");
          }
        }
      }
    }
    out = v.get<V>();
    return *this;
  }

  template <class F>
  FieldReader& object(const char* key, F&& fn) {
    seen_.insert(key);
    if (j_.contains(key)) {
      FieldReader sub(j_[key], child(key));
      fn(sub);
      sub.finish();
    }
    return *this;
  }

  void finish() const {
    for (const auto& [k, _] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("field '" + child(k) + "': unknown field");
    }
  }

 private:
  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_fields(FieldReader& r, ModelConfig& c) {
  r.get("num_classes", c.num_classes)
      .get("image_size", c.image_size)
      .get("hidden_width", c.hidden_width)
      .get("halve_decoupled_width", c.halve_decoupled_width)
      .get("head_init_std", c.head_init_std)
      .get("mask_width", c.mask_width)
      .get("ds_enabled", c.ds_enabled)
      .get("dc_enabled", c.dc_enabled)
      .get("with_masks", c.with_masks)
      .get("num_stages", c.num_stages)
      .get("aux_box_source", c.aux_box_source)
      .get("cascade_iou_thresholds", c.cascade_iou_thresholds);
  r.object("pyramid", [&](FieldReader& p) {
    p.get("num_levels", c.pyramid.num_levels)
        .get("backbone_channels", c.pyramid.backbone_channels)
        .get("out_channels", c.pyramid.out_channels)
        .get("level_strides", c.pyramid.level_strides)
        .get("assign_k0", c.pyramid.assign_k0)
        .get("assign_scale", c.pyramid.assign_scale);
  });
  r.object("rpn", [&](FieldReader& p) {
    p.get("anchor_scale", c.rpn.anchor_scale)
        .get("aspect_ratios", c.rpn.aspect_ratios)
        .get("pos_iou", c.rpn.pos_iou)
        .get("neg_iou", c.rpn.neg_iou)
        .get("batch_per_image", c.rpn.batch_per_image)
        .get("fg_fraction", c.rpn.fg_fraction)
        .get("pre_nms_k", c.rpn.pre_nms_k)
        .get("post_nms_n", c.rpn.post_nms_n)
        .get("nms_thresh", c.rpn.nms_thresh)
        .get("min_size", c.rpn.min_size);
  });
  r.object("roi", [&](FieldReader& p) {
    p.get("output_h", c.roi.output_h).get("output_w", c.roi.output_w).get("sampling_ratio", c.roi.sampling_ratio);
  });
  r.object("loss_weights", [&](FieldReader& p) {
    p.get("aux_det", c.loss_weights.aux_det)
        .get("aux_mask", c.loss_weights.aux_mask)
        .get("mask", c.loss_weights.mask)
        .get("stages", c.loss_weights.stages)
        .get("rpn", c.loss_weights.rpn);
  });
  r.object("inference", [&](FieldReader& p) {
    p.get("score_thresh", c.inference.score_thresh)
        .get("nms_thresh", c.inference.nms_thresh)
        .get("max_detections", c.inference.max_detections)
        .get("pre_nms_k", c.inference.pre_nms_k)
        .get("post_nms_n", c.inference.post_nms_n);
  });
}

inline void read_fields(FieldReader& r, TrainConfig& c) {
  r.get("lr", c.lr)
      .get("momentum", c.momentum)
      .get("weight_decay", c.weight_decay)
      .get("iterations", c.iterations)
      .get("lr_decay_at", c.lr_decay_at)
      .get("lr_decay", c.lr_decay)
      .get("batch_size", c.batch_size)
      .get("roi_batch", c.roi_batch)
      .get("fg_fraction", c.fg_fraction)
      .get("seed", c.seed)
      .get("eval_interval", c.eval_interval)
      .get("train_eval_subsample", c.train_eval_subsample);
}

// Validation failures are reported against the section they came from.
template <class C>
void validate_section(const C& c, const std::string& section) {
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(section + ": " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"num_classes", c.num_classes},
          {"image_size", c.image_size},
          {"hidden_width", c.hidden_width},
          {"halve_decoupled_width", c.halve_decoupled_width},
          {"head_init_std", c.head_init_std},
          {"mask_width", c.mask_width},
          {"ds_enabled", c.ds_enabled},
          {"dc_enabled", c.dc_enabled},
          {"with_masks", c.with_masks},
          {"num_stages", c.num_stages},
          {"aux_box_source", c.aux_box_source},
          {"cascade_iou_thresholds", c.cascade_iou_thresholds},
          {"pyramid",
           {{"num_levels", c.pyramid.num_levels},
            {"backbone_channels", c.pyramid.backbone_channels},
            {"out_channels", c.pyramid.out_channels},
            {"level_strides", c.pyramid.level_strides},
            {"assign_k0", c.pyramid.assign_k0},
            {"assign_scale", c.pyramid.assign_scale}}},
          {"rpn",
           {{"anchor_scale", c.rpn.anchor_scale},
            {"aspect_ratios", c.rpn.aspect_ratios},
            {"pos_iou", c.rpn.pos_iou},
            {"neg_iou", c.rpn.neg_iou},
            {"batch_per_image", c.rpn.batch_per_image},
            {"fg_fraction", c.rpn.fg_fraction},
            {"pre_nms_k", c.rpn.pre_nms_k},
            {"post_nms_n", c.rpn.post_nms_n},
            {"nms_thresh", c.rpn.nms_thresh},
            {"min_size", c.rpn.min_size}}},
          {"roi", {{"output_h", c.roi.output_h}, {"output_w", c.roi.output_w}, {"sampling_ratio", c.roi.sampling_ratio}}},
          {"loss_weights",
           {{"aux_det", c.loss_weights.aux_det},
            {"aux_mask", c.loss_weights.aux_mask},
            {"mask", c.loss_weights.mask},
            {"stages", c.loss_weights.stages},
            {"rpn", c.loss_weights.rpn}}},
          {"inference",
           {{"score_thresh", c.inference.score_thresh},
            {"nms_thresh", c.inference.nms_thresh},
            {"max_detections", c.inference.max_detections},
            {"pre_nms_k", c.inference.pre_nms_k},
            {"post_nms_n", c.inference.post_nms_n}}}};
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"iterations", c.iterations},
          {"lr_decay_at", c.lr_decay_at},
          {"lr_decay", c.lr_decay},
          {"batch_size", c.batch_size},
          {"roi_batch", c.roi_batch},
          {"fg_fraction", c.fg_fraction},
          {"seed", c.seed},
          {"eval_interval", c.eval_interval},
          {"train_eval_subsample", c.train_eval_subsample}};
}

// Missing fields keep their defaults; unknown or mistyped fields are errors naming the field.
inline ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& path = "model") {
  ModelConfig c;
  detail::FieldReader r(j, path);
  detail::read_fields(r, c);
  r.finish();
  detail::validate_section(c, path);
  return c;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& path = "train") {
  TrainConfig c;
  detail::FieldReader r(j, path);
  detail::read_fields(r, c);
  r.finish();
  detail::validate_section(c, path);
  return c;
}

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
};

inline nlohmann::json to_json(const ExperimentConfig& c) { return {{"model", to_json(c.model)}, {"train", to_json(c.train)}}; }

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: expected an object with 'model' and 'train' sections");
  for (const auto& [k, _] : j.items()) {
    if (k != "model" && k != "train") throw ConfigError("field '" + k + "': unknown field");
  }
  ExperimentConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j["model"]);
  if (j.contains("train")) c.train = train_config_from_json(j["train"]);
  return c;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed JSON in '" + path + "': " + e.what());
  }
}

inline ExperimentConfig load_experiment(const std::string& path) { return experiment_from_json(read_json_file(path)); }

}  // namespace dsfpn
