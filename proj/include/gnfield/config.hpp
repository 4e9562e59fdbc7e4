#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include "gnfield/model.hpp"

namespace gnfield {

// Full training configuration. Serialized as flat key=value text; unknown
// keys are rejected, missing keys keep their defaults.
struct TrainConfig {
  int64_t steps = 20000;
  int rays_per_batch = 256;  // B
  int samples_per_ray = 32;  // K (desk default; paper-parity runs use 64)
  int n_references = 8;      // N
  int pool_factor = 2;       // P
  double lr_backbone = 1e-3;
  double lr_rest = 5e-4;
  double decay_factor = 0.5;
  int64_t decay_interval = 5000;
  double lambda1 = 0.1;  // backbone loss weight
  double lambda2 = 1.0;  // dynamic-weights loss weight
  uint64_t seed = 0;
  int rank = 4;
  int app_branches = 2;  // Z
  int hidden = 32;       // d
  int d_feat = 32;
  int geo_layers = 4;
  int pe_x = 6;
  int pe_d = 4;
  int backbone_width = 8;
  double static_sharpness = 5.0;
  std::string aggregation = "full";  // full | static_only | dynamic_only
  bool multi_layer = true;
  bool freeze_generators = false;
  bool jitter = true;
  std::string data_dir;
  std::string out_checkpoint = "model.ckpt";
  int64_t log_every = 100;
  int64_t checkpoint_every = 0;  // 0: final only

  ModelConfig model_config() const {
    ModelConfig mc;
    mc.field.samples_per_ray = samples_per_ray;
    mc.field.hidden = hidden;
    mc.field.geo_layers = geo_layers;
    mc.field.app_branches = app_branches;
    mc.field.pe_x = pe_x;
    mc.field.pe_d = pe_d;
    mc.field.rank = rank;
    mc.field.d_feat = d_feat;
    mc.backbone_width = backbone_width;
    mc.agg_mode = aggregation_mode_from_string(aggregation);
    mc.multi_layer = multi_layer;
    mc.freeze_generators = freeze_generators;
    mc.static_sharpness = static_sharpness;
    mc.init_seed = seed;
    return mc;
  }

  std::map<std::string, std::string> to_map() const {
    std::map<std::string, std::string> m;
    auto num = [](auto v) {
      std::ostringstream os;
      os.precision(17);
      os << v;
      return os.str();
    };
    m["steps"] = num(steps);
    m["rays_per_batch"] = num(rays_per_batch);
    m["samples_per_ray"] = num(samples_per_ray);
    m["n_references"] = num(n_references);
    m["pool_factor"] = num(pool_factor);
    m["lr_backbone"] = num(lr_backbone);
    m["lr_rest"] = num(lr_rest);
    m["decay_factor"] = num(decay_factor);
    m["decay_interval"] = num(decay_interval);
    m["lambda1"] = num(lambda1);
    m["lambda2"] = num(lambda2);
    m["seed"] = num(seed);
    m["rank"] = num(rank);
    m["app_branches"] = num(app_branches);
    m["hidden"] = num(hidden);
    m["d_feat"] = num(d_feat);
    m["geo_layers"] = num(geo_layers);
    m["pe_x"] = num(pe_x);
    m["pe_d"] = num(pe_d);
    m["backbone_width"] = num(backbone_width);
    m["static_sharpness"] = num(static_sharpness);
    m["aggregation"] = aggregation;
    m["multi_layer"] = multi_layer ? "true" : "false";
    m["freeze_generators"] = freeze_generators ? "true" : "false";
    m["jitter"] = jitter ? "true" : "false";
    m["data_dir"] = data_dir;
    m["out_checkpoint"] = out_checkpoint;
    m["log_every"] = num(log_every);
    m["checkpoint_every"] = num(checkpoint_every);
    return m;
  }

  void set(const std::string& key, const std::string& value) {
    auto to_i = [&] { return std::stoll(value); };
    auto to_u = [&] { return std::stoull(value); };
    auto to_d = [&] { return std::stod(value); };
    auto to_b = [&]() -> bool {
      if (value == "true" || value == "1") return true;
      if (value == "false" || value == "0") return false;
      throw std::invalid_argument("config: boolean expected for " + key + ", got " + value);
    };
    if (key == "steps") steps = to_i();
    else if (key == "rays_per_batch") rays_per_batch = static_cast<int>(to_i());
    else if (key == "samples_per_ray") samples_per_ray = static_cast<int>(to_i());
    else if (key == "n_references") n_references = static_cast<int>(to_i());
    else if (key == "pool_factor") pool_factor = static_cast<int>(to_i());
    else if (key == "lr_backbone") lr_backbone = to_d();
    else if (key == "lr_rest") lr_rest = to_d();
    else if (key == "decay_factor") decay_factor = to_d();
    else if (key == "decay_interval") decay_interval = to_i();
    else if (key == "lambda1") lambda1 = to_d();
    else if (key == "lambda2") lambda2 = to_d();
    else if (key == "seed") seed = to_u();
    else if (key == "rank") rank = static_cast<int>(to_i());
    else if (key == "app_branches") app_branches = static_cast<int>(to_i());
    else if (key == "hidden") hidden = static_cast<int>(to_i());
    else if (key == "d_feat") d_feat = static_cast<int>(to_i());
    else if (key == "geo_layers") geo_layers = static_cast<int>(to_i());
    else if (key == "pe_x") pe_x = static_cast<int>(to_i());
    else if (key == "pe_d") pe_d = static_cast<int>(to_i());
    else if (key == "backbone_width") backbone_width = static_cast<int>(to_i());
    else if (key == "static_sharpness") static_sharpness = to_d();
    else if (key == "aggregation") aggregation = value;
    else if (key == "multi_layer") multi_layer = to_b();
    else if (key == "freeze_generators") freeze_generators = to_b();
    else if (key == "jitter") jitter = to_b();
    else if (key == "data_dir") data_dir = value;
    else if (key == "out_checkpoint") out_checkpoint = value;
    else if (key == "log_every") log_every = to_i();
    else if (key == "checkpoint_every") checkpoint_every = to_i();
    else throw std::invalid_argument("config: unknown key '" + key + "'");
  }

  void validate() const {
    if (steps <= 0 || rays_per_batch <= 0 || samples_per_ray <= 0 || n_references <= 0 ||
        pool_factor <= 0 || decay_interval <= 0)
      throw std::invalid_argument("config: counts must be positive");
    if (lr_backbone <= 0 || lr_rest <= 0 || decay_factor <= 0)
      throw std::invalid_argument("config: rates must be positive");
    if (lambda1 < 0 || lambda2 < 0) throw std::invalid_argument("config: lambdas must be >= 0");
    aggregation_mode_from_string(aggregation);
  }
};

inline TrainConfig parse_train_config_text(std::istream& is) {
  TrainConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key=value");
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    auto strip = [](std::string& s) {
      const auto a = s.find_first_not_of(" \t");
      const auto b = s.find_last_not_of(" \t");
      s = a == std::string::npos ? "" : s.substr(a, b - a + 1);
    };
    strip(key);
    strip(value);
    cfg.set(key, value);
  }
  cfg.validate();
  return cfg;
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config: " + path);
  return parse_train_config_text(f);
}

inline void save_train_config(const std::string& path, const TrainConfig& cfg) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write config: " + path);
  for (const auto& [k, v] : cfg.to_map()) f << k << "=" << v << "\n";
}

// FNV-1a over the canonical serialization; used to stamp eval reports.
inline std::string config_hash(const TrainConfig& cfg) {
  std::string blob;
  for (const auto& [k, v] : cfg.to_map()) blob += k + "=" + v + ";";
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(blob)));
  return buf;
}

}  // namespace gnfield
