#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsfpn/tensor.hpp"

namespace dsfpn {

// Named trainable tensors. Ordered by name so iteration order is stable.
template <class T>
class ParamSet {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  void add(const std::string& name, Tensor<T> tensor) {
    tensor.set_requires_grad(true);
    if (!params_.emplace(name, std::move(tensor)).second) {
      throw std::invalid_argument("duplicate parameter '" + name + "'");
    }
  }

  const Tensor<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("missing parameter '" + name + "'");
    return it->second;
  }
  Tensor<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("missing parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  void erase(const std::string& name) { params_.erase(name); }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

  // Deep copy: new leaves with the same values.
  ParamSet clone() const {
    ParamSet out;
    for (const auto& [name, t] : params_) out.add(name, t.detach());
    return out;
  }

  // Order-sensitive FNV-1a over names and raw values.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ull;
    };
    for (const auto& [name, t] : params_) {
      mix(name.data(), name.size());
      mix(t.data().data(), t.numel() * sizeof(T));
    }
    return h;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  Map params_;
};

// Name → shape listing used to compare model variants.
using ParamInventory = std::map<std::string, Shape>;

template <class T>
ParamInventory inventory(const ParamSet<T>& params) {
  ParamInventory inv;
  for (const auto& [name, t] : params) inv.emplace(name, t.shape());
  return inv;
}

namespace init {

template <class T>
Tensor<T> normal(const Shape& shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> data(numel(shape));
  for (auto& v : data) v = static_cast<T>(dist(rng));
  return Tensor<T>::from_data(shape, std::move(data));
}

// He-normal conv weight O×C×k×k plus zero bias.
template <class T>
void conv(ParamSet<T>& params, const std::string& name, std::size_t out_ch, std::size_t in_ch, std::size_t k,
          std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(in_ch * k * k);
  params.add(name + ".weight", normal<T>({out_ch, in_ch, k, k}, std::sqrt(2.0 / fan_in), rng));
  params.add(name + ".bias", Tensor<T>::zeros({out_ch}));
}

template <class T>
void linear(ParamSet<T>& params, const std::string& name, std::size_t out_f, std::size_t in_f, double stddev,
            std::mt19937_64& rng) {
  params.add(name + ".weight", normal<T>({out_f, in_f}, stddev, rng));
  params.add(name + ".bias", Tensor<T>::zeros({out_f}));
}

}  // namespace init

}  // namespace dsfpn
