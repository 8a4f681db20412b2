#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "dsfpn/dsfpn.hpp"

namespace dsfpn::testing {

// 32×32 images, three pyramid levels, hidden width 16.
inline ModelConfig micro_config(bool ds, bool dc, bool masks, std::size_t stages = 1) {
  ModelConfig c;
  c.image_size = 32;
  c.pyramid.num_levels = 3;
  c.pyramid.backbone_channels = {4, 8, 8};
  c.pyramid.out_channels = 6;
  c.pyramid.level_strides = {2, 4, 8};
  c.hidden_width = 16;
  c.mask_width = 4;
  c.head_init_std = 0.1;
  c.roi = {2, 2, 2};
  c.rpn.batch_per_image = 16;
  c.rpn.pre_nms_k = 64;
  c.rpn.post_nms_n = 12;
  c.ds_enabled = ds;
  c.dc_enabled = dc;
  c.with_masks = masks;
  c.num_stages = stages;
  c.aux_box_source = 0;
  return c;
}

inline SynthConfig micro_synth() { return {1, 3, 7, 14, 0.35}; }

inline Dataset micro_dataset(std::size_t n, std::uint64_t seed, std::size_t classes = 3) {
  return synth_generate(n, 32, classes, seed, micro_synth());
}

inline SamplingConfig micro_sampling() { return {8, 0.5}; }

template <class T>
ParamSet<T> as_params(const ParamSet<float>& p) {
  ParamSet<T> out;
  for (const auto& [name, t] : p) out.add(name, Tensor<T>::from_data(t.shape(), std::vector<T>(t.data().begin(), t.data().end())));
  return out;
}

// Scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("dsfpn_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string str(const std::string& child = "") const { return (child.empty() ? path_ : path_ / child).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace dsfpn::testing
