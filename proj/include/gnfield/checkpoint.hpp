#pragma once

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "gnfield/config.hpp"
#include "gnfield/image_io.hpp"
#include "gnfield/params.hpp"
#include "gnfield/zipfile.hpp"

namespace gnfield {

constexpr int kCheckpointVersion = 1;

// Checkpoint archive: manifest.json (version, config, step, train scenes,
// tensor table) + tensors.bin (concatenated little-endian float32).
struct CheckpointData {
  TrainConfig config;
  int64_t step = 0;
  std::vector<std::string> train_scenes;
  std::map<std::string, Tensor<float>> tensors;
};

namespace detail {

inline void append_f32(std::vector<uint8_t>& out, const Tensor<float>& t) {
  const size_t bytes = t.v.size() * sizeof(float);
  const size_t at = out.size();
  out.resize(at + bytes);
  std::memcpy(out.data() + at, t.v.data(), bytes);
}

}  // namespace detail

template <class S>
void save_checkpoint(const std::string& path, const ParamStore<S>& store, const TrainConfig& cfg,
                     int64_t step, const std::vector<std::string>& train_scenes) {
  nlohmann::json manifest;
  manifest["version"] = kCheckpointVersion;
  manifest["format"] = "gnfield-checkpoint";
  manifest["step"] = step;
  manifest["train_scenes"] = train_scenes;
  nlohmann::json jcfg;
  for (const auto& [k, v] : cfg.to_map()) jcfg[k] = v;
  manifest["config"] = jcfg;

  std::vector<uint8_t> bin;
  nlohmann::json table = nlohmann::json::array();
  auto emit = [&](const std::string& name, const Tensor<S>& t) {
    nlohmann::json e;
    e["name"] = name;
    std::vector<int64_t> shape(t.shape.d.begin(), t.shape.d.begin() + t.shape.nd);
    e["shape"] = shape;
    e["dtype"] = "f32";
    e["offset"] = bin.size();
    table.push_back(e);
    if constexpr (std::is_same_v<S, float>) {
      detail::append_f32(bin, t);
    } else {
      detail::append_f32(bin, t.template cast<float>());
    }
  };
  for (const Param<S>& p : store.all()) {
    emit(p.name, p.value);
    if (p.trainable && !p.m.empty()) {
      emit("adam.m." + p.name, p.m);
      emit("adam.v." + p.name, p.v);
    }
  }
  manifest["tensors"] = table;

  ZipWriter zw;
  const std::string mtext = manifest.dump(1);
  zw.add("manifest.json", std::vector<uint8_t>(mtext.begin(), mtext.end()));
  zw.add("tensors.bin", bin);
  const std::vector<uint8_t> archive = zw.finish();

  // write-temp-then-rename so readers never see a partial checkpoint
  const std::string tmp = path + ".tmp";
  write_file(tmp, archive);
  std::filesystem::rename(tmp, path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
  ZipReader zr(read_file(path));
  const std::vector<uint8_t> mbytes = zr.read("manifest.json");
  nlohmann::json manifest = nlohmann::json::parse(mbytes.begin(), mbytes.end());
  if (!manifest.contains("version") || manifest.at("version").get<int>() != kCheckpointVersion)
    throw std::runtime_error("checkpoint version mismatch in " + path + " (expected " +
                             std::to_string(kCheckpointVersion) + ")");
  CheckpointData data;
  data.step = manifest.at("step");
  data.train_scenes = manifest.at("train_scenes").get<std::vector<std::string>>();
  for (const auto& [k, v] : manifest.at("config").items())
    data.config.set(k, v.get<std::string>());
  data.config.validate();

  const std::vector<uint8_t> bin = zr.read("tensors.bin");
  for (const auto& e : manifest.at("tensors")) {
    const std::string name = e.at("name");
    const std::vector<int64_t> shape_v = e.at("shape").get<std::vector<int64_t>>();
    if (e.at("dtype") != "f32") throw std::runtime_error("checkpoint: unsupported dtype");
    Shape shape;
    shape.nd = static_cast<int>(shape_v.size());
    for (int i = 0; i < shape.nd; ++i) shape.d[static_cast<size_t>(i)] = shape_v[static_cast<size_t>(i)];
    const size_t offset = e.at("offset");
    Tensor<float> t(shape);
    const size_t nbytes = t.v.size() * sizeof(float);
    if (offset + nbytes > bin.size()) throw std::runtime_error("checkpoint: truncated tensors.bin");
    std::memcpy(t.v.data(), bin.data() + offset, nbytes);
    data.tensors.emplace(name, std::move(t));
  }
  return data;
}

// Installs checkpoint tensors into a freshly constructed store; every store
// parameter must be present with a matching shape.
template <class S>
void restore_store(ParamStore<S>& store, const CheckpointData& data) {
  for (Param<S>& p : store.all()) {
    auto it = data.tensors.find(p.name);
    if (it == data.tensors.end())
      throw std::runtime_error("checkpoint: missing tensor " + p.name);
    if (it->second.shape != p.value.shape)
      throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
    p.value = it->second.template cast<S>();
    auto mit = data.tensors.find("adam.m." + p.name);
    auto vit = data.tensors.find("adam.v." + p.name);
    if (mit != data.tensors.end() && vit != data.tensors.end()) {
      p.m = mit->second.template cast<S>();
      p.v = vit->second.template cast<S>();
    }
  }
}

}  // namespace gnfield
