#pragma once

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <type_traits>

#include <json.hpp>

#include "dsfpn/config.hpp"
#include "dsfpn/params.hpp"

namespace dsfpn {

template <class T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "parameters are f32 or f64");
  return std::is_same_v<T, float> ? "f32" : "f64";
}

struct Checkpoint {
  ModelConfig config;
  nlohmann::json manifest;
};

// <prefix>.json holds the config and name -> {shape, dtype, offset}; <prefix>.bin holds the tensor blobs back to back.
template <class T>
void write_checkpoint(const std::string& prefix, const ModelConfig& cfg, const ParamSet<T>& params) {
  const std::filesystem::path json_path = prefix + ".json", bin_path = prefix + ".bin";
  if (json_path.has_parent_path()) std::filesystem::create_directories(json_path.parent_path());
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot write '" + bin_path.string() + "'");
  nlohmann::json entries = nlohmann::json::object();
  std::size_t offset = 0;
  for (const auto& [name, t] : params) {
    entries[name] = {{"shape", t.shape()}, {"dtype", dtype_name<T>()}, {"offset", offset}};
    write_tensor(bin, t);
    offset += serialized_size(t);
  }
  if (!bin) throw std::runtime_error("failed writing '" + bin_path.string() + "'");
  nlohmann::json manifest{{"format", "dsfpn-checkpoint"},
                          {"version", 1},
                          {"blob", bin_path.filename().string()},
                          {"config", to_json(cfg)},
                          {"parameters", entries}};
  std::ofstream js(json_path);
  if (!js) throw std::runtime_error("cannot write '" + json_path.string() + "'");
  js << manifest.dump(1) << '\n';
}

namespace detail {
template <class Stored, class T>
Tensor<T> read_converted(std::istream& is) {
  const auto raw = read_tensor<Stored>(is);
  std::vector<T> data(raw.data().begin(), raw.data().end());
  return Tensor<T>::from_data(raw.shape(), std::move(data));
}
}  // namespace detail

// Accepts the manifest path or the shared prefix. Parameters stored in the other precision are converted.
template <class T>
std::pair<ModelConfig, ParamSet<T>> read_checkpoint(std::string path) {
  if (path.size() > 5 && path.compare(path.size() - 5, 5, ".json") == 0) path.resize(path.size() - 5);
  const std::filesystem::path json_path = path + ".json";
  const auto manifest = read_json_file(json_path.string());
  if (manifest.value("format", "") != "dsfpn-checkpoint") {
    throw std::runtime_error("'" + json_path.string() + "' is not a checkpoint manifest");
  }
  const ModelConfig cfg = model_config_from_json(manifest.at("config"), "config");
  const auto bin_path = json_path.parent_path() / manifest.at("blob").get<std::string>();
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open '" + bin_path.string() + "'");
  ParamSet<T> params;
  const nlohmann::json& entries = manifest.at("parameters");
  for (auto it = entries.begin(); it != entries.end(); ++it) {
    const std::string& name = it.key();
    const nlohmann::json& e = it.value();
    bin.seekg(static_cast<std::streamoff>(e.at("offset").get<std::size_t>()));
    const auto dtype = e.at("dtype").get<std::string>();
    Tensor<T> t;
    if (dtype == "f32") {
      t = detail::read_converted<float, T>(bin);
    } else if (dtype == "f64") {
      t = detail::read_converted<double, T>(bin);
    } else {
      throw std::runtime_error("parameter '" + name + "' has unknown dtype '" + dtype + "'");
    }
    if (t.shape() != e.at("shape").get<Shape>()) {
      throw std::runtime_error("parameter '" + name + "' does not match its manifest shape");
    }
    params.add(name, std::move(t));
  }
  return {cfg, std::move(params)};
}

}  // namespace dsfpn
