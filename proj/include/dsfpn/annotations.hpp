#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsfpn/box.hpp"
#include "dsfpn/tensor.hpp"

namespace dsfpn {

// Binary mask, row-major.
struct Mask {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(std::size_t h, std::size_t w) : height(h), width(w), data(h * w, 0) {}

  std::uint8_t at(std::size_t y, std::size_t x) const { return data[y * width + x]; }
  std::uint8_t& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : data) n += v != 0;
    return n;
  }
  bool operator==(const Mask&) const = default;
};

// Tight box around the set pixels, in half-open continuous coordinates.
inline Box mask_bounds(const Mask& m) {
  std::size_t x1 = m.width, y1 = m.height, x2 = 0, y2 = 0;
  for (std::size_t y = 0; y < m.height; ++y) {
    for (std::size_t x = 0; x < m.width; ++x) {
      if (!m.at(y, x)) continue;
      x1 = std::min(x1, x);
      y1 = std::min(y1, y);
      x2 = std::max(x2, x + 1);
      y2 = std::max(y2, y + 1);
    }
  }
  if (x2 == 0) return {};
  return {double(x1), double(y1), double(x2), double(y2)};
}

// Three-channel float image in [0, 1], CHW.
struct Image {
  std::size_t height = 0, width = 0;
  std::vector<float> data;

  Image() = default;
  Image(std::size_t h, std::size_t w) : height(h), width(w), data(3 * h * w, 0.0f) {}
  float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
  bool operator==(const Image&) const = default;
};

struct Instance {
  Box box;
  int category = 0;  // 0-based class id
  Mask mask;
  bool operator==(const Instance&) const = default;
};

struct Sample {
  int image_id = 0;
  std::string file_name;
  Image image;
  std::vector<Instance> instances;
};

template <class T>
Tensor<T> images_to_tensor(const std::vector<const Image*>& images) {
  if (images.empty()) throw std::invalid_argument("empty image batch");
  const std::size_t h = images[0]->height, w = images[0]->width;
  std::vector<T> data;
  data.reserve(images.size() * 3 * h * w);
  for (const Image* im : images) {
    if (im->height != h || im->width != w) throw DimensionError("batch images must share one size");
    for (float v : im->data) data.push_back(static_cast<T>(v));
  }
  return Tensor<T>::from_data({images.size(), 3, h, w}, std::move(data));
}

}  // namespace dsfpn
