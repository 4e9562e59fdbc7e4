#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gnfield/camera.hpp"
#include "gnfield/image_io.hpp"
#include "gnfield/rng.hpp"

namespace gnfield {

enum class PrimitiveKind { kSphere, kBox };

struct Primitive {
  PrimitiveKind kind = PrimitiveKind::kSphere;
  Vec3 center;
  double size = 0.5;  // sphere radius / box half-extent
  std::array<double, 3> albedo{0.5, 0.5, 0.5};
};

struct SceneSpec {
  uint64_t seed = 0;
  std::vector<Primitive> primitives;
  struct {
    double height = -0.6;
    std::array<double, 3> albedo{0.4, 0.4, 0.4};
  } ground_plane;
  std::array<double, 3> background{0.1, 0.1, 0.1};
  struct {
    Vec3 direction{0, 0, 1};  // unit, surface -> light
    double intensity = 0.9;
    double ambient = 0.2;
  } light;
};

enum class Difficulty { kSmall, kMedium };

inline SceneSpec make_scene(uint64_t seed, Difficulty difficulty) {
  Rng rng(seed, "scene");
  SceneSpec s;
  s.seed = seed;
  const int lo = difficulty == Difficulty::kSmall ? 1 : 3;
  const int hi = difficulty == Difficulty::kSmall ? 4 : 6;
  const int count = lo + static_cast<int>(rng.uniform_int(hi - lo + 1));
  for (int i = 0; i < count; ++i) {
    Primitive p;
    p.kind = rng.uniform() < 0.5 ? PrimitiveKind::kSphere : PrimitiveKind::kBox;
    p.center = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-0.3, 0.7)};
    p.size = rng.uniform(0.25, 0.55);
    for (auto& a : p.albedo) a = rng.uniform(0.1, 0.95);
    s.primitives.push_back(p);
  }
  s.ground_plane.height = rng.uniform(-0.8, -0.5);
  for (auto& a : s.ground_plane.albedo) a = rng.uniform(0.2, 0.9);
  for (auto& b : s.background) b = rng.uniform(0.05, 0.9);
  const double az = rng.uniform(0.0, 6.283185307179586);
  const double el = rng.uniform(0.6108652381980153, 1.3962634015954636);  // 35..80 deg
  s.light.direction = {std::cos(az) * std::cos(el), std::sin(az) * std::cos(el), std::sin(el)};
  s.light.intensity = rng.uniform(0.7, 1.0);
  s.light.ambient = rng.uniform(0.15, 0.3);
  return s;
}

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  Vec3 normal;
  std::array<double, 3> albedo{0, 0, 0};
};

inline std::optional<double> intersect_sphere(const Vec3& o, const Vec3& d, const Vec3& c,
                                              double r) {
  const Vec3 oc = o - c;
  const double b = oc.dot(d);
  const double disc = b * b - (oc.dot(oc) - r * r);
  if (disc < 0) return std::nullopt;
  const double sq = std::sqrt(disc);
  double t = -b - sq;
  if (t <= 1e-9) t = -b + sq;
  if (t <= 1e-9) return std::nullopt;
  return t;
}

inline std::optional<std::pair<double, Vec3>> intersect_box(const Vec3& o, const Vec3& d,
                                                            const Vec3& c, double half) {
  double tmin = -std::numeric_limits<double>::infinity();
  double tmax = std::numeric_limits<double>::infinity();
  int axis_min = -1;
  const double od[3] = {o.x - c.x, o.y - c.y, o.z - c.z};
  const double dd[3] = {d.x, d.y, d.z};
  for (int a = 0; a < 3; ++a) {
    if (std::abs(dd[a]) < 1e-12) {
      if (std::abs(od[a]) > half) return std::nullopt;
      continue;
    }
    double t0 = (-half - od[a]) / dd[a];
    double t1 = (half - od[a]) / dd[a];
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > tmin) {
      tmin = t0;
      axis_min = a;
    }
    tmax = std::min(tmax, t1);
    if (tmin > tmax) return std::nullopt;
  }
  double t = tmin;
  if (t <= 1e-9) return std::nullopt;  // origins inside boxes are not expected
  Vec3 n{0, 0, 0};
  const double pa[3] = {od[0] + t * dd[0], od[1] + t * dd[1], od[2] + t * dd[2]};
  if (axis_min < 0) return std::nullopt;
  (axis_min == 0 ? n.x : axis_min == 1 ? n.y : n.z) = pa[axis_min] > 0 ? 1.0 : -1.0;
  return std::make_pair(t, n);
}

// Closest hit against all primitives and the ground plane.
inline std::optional<Hit> trace_ray(const SceneSpec& scene, const Vec3& o, const Vec3& d) {
  Hit best;
  for (const Primitive& p : scene.primitives) {
    if (p.kind == PrimitiveKind::kSphere) {
      if (auto t = intersect_sphere(o, d, p.center, p.size); t && *t < best.t) {
        best.t = *t;
        best.normal = (o + d * *t - p.center).normalized();
        best.albedo = p.albedo;
      }
    } else {
      if (auto hit = intersect_box(o, d, p.center, p.size); hit && hit->first < best.t) {
        best.t = hit->first;
        best.normal = hit->second;
        best.albedo = p.albedo;
      }
    }
  }
  if (std::abs(d.z) > 1e-12) {
    const double t = (scene.ground_plane.height - o.z) / d.z;
    if (t > 1e-9 && t < best.t) {
      best.t = t;
      best.normal = {0, 0, o.z > scene.ground_plane.height ? 1.0 : -1.0};
      best.albedo = scene.ground_plane.albedo;
    }
  }
  if (!std::isfinite(best.t)) return std::nullopt;
  return best;
}

// Lambertian + ambient, clamped to [0,1].
inline std::array<double, 3> shade(const SceneSpec& scene, const Hit& hit) {
  const double lambert = std::max(0.0, hit.normal.dot(scene.light.direction));
  const double gain = lambert * scene.light.intensity + scene.light.ambient;
  std::array<double, 3> c;
  for (int i = 0; i < 3; ++i) c[i] = std::clamp(hit.albedo[i] * gain, 0.0, 1.0);
  return c;
}

struct RenderedView {
  Tensor<float> rgb;    // [H,W,3]
  Tensor<float> depth;  // [H,W], +inf on background
};

inline RenderedView render_reference(const SceneSpec& scene, const Intrinsics& intr,
                                     const Pose& pose) {
  if (intr.width < 16 || intr.height < 16)
    throw std::invalid_argument("render_reference: resolution must be >= 16x16");
  if (std::abs(pose.rotation_det()) < 1e-9)
    throw std::invalid_argument("render_reference: degenerate pose");
  RenderedView out;
  out.rgb = Tensor<float>(Shape{intr.height, intr.width, 3});
  out.depth = Tensor<float>(Shape{intr.height, intr.width});
  const Vec3 origin = pose.camera_center();
#pragma omp parallel for
  for (int j = 0; j < intr.height; ++j) {
    for (int i = 0; i < intr.width; ++i) {
      const Vec3 dir_cam{(i - intr.cx) / intr.fx, (j - intr.cy) / intr.fy, 1.0};
      const Vec3 dir = pose.rotate_transpose(dir_cam).normalized();
      if (auto hit = trace_ray(scene, origin, dir)) {
        const auto c = shade(scene, *hit);
        for (int ch = 0; ch < 3; ++ch) out.rgb.at(j, i, ch) = static_cast<float>(c[ch]);
        out.depth.at(j, i) = static_cast<float>(hit->t);
      } else {
        for (int ch = 0; ch < 3; ++ch)
          out.rgb.at(j, i, ch) = static_cast<float>(scene.background[ch]);
        out.depth.at(j, i) = std::numeric_limits<float>::infinity();
      }
    }
  }
  return out;
}

struct SceneDataset {
  std::string scene_id;
  std::vector<CameraView> views;
  std::vector<Tensor<float>> depths;  // [H,W] per view
  std::string split;                  // "train" | "heldout"
  std::array<double, 3> background{0, 0, 0};
  double near = 0, far = 0;
};

// Camera rig: upper-hemisphere ring at fixed radius looking at the origin.
inline std::vector<Pose> hemisphere_poses(int count, uint64_t seed, double radius = 4.0) {
  Rng rng(seed, "rig");
  std::vector<Pose> poses;
  constexpr double kGolden = 2.399963229728653;  // golden angle
  for (int v = 0; v < count; ++v) {
    const double az = std::fmod(v * kGolden + rng.uniform(0.0, 0.25), 6.283185307179586);
    const double el = rng.uniform(0.6981317007977318, 1.2217304763960306);  // 40..70 deg
    const Vec3 eye{radius * std::cos(az) * std::cos(el), radius * std::sin(az) * std::cos(el),
                   radius * std::sin(el)};
    poses.push_back(look_at(eye, {0, 0, 0}));
  }
  return poses;
}

inline Intrinsics default_intrinsics(int w, int h) {
  Intrinsics intr;
  intr.width = w;
  intr.height = h;
  const double fov = 0.6981317007977318;  // 40 deg
  intr.fx = intr.fy = 0.5 * std::max(w, h) / std::tan(fov / 2);
  intr.cx = w / 2.0;
  intr.cy = h / 2.0;
  return intr;
}

constexpr double kDatasetNear = 1.8;
constexpr double kDatasetFar = 10.0;

inline SceneDataset generate_scene_dataset(const std::string& scene_id, const SceneSpec& scene,
                                           int views, int w, int h, uint64_t rig_seed) {
  SceneDataset ds;
  ds.scene_id = scene_id;
  ds.background = scene.background;
  ds.near = kDatasetNear;
  ds.far = kDatasetFar;
  const Intrinsics intr = default_intrinsics(w, h);
  for (const Pose& pose : hemisphere_poses(views, rig_seed)) {
    RenderedView rv = render_reference(scene, intr, pose);
    CameraView cv;
    cv.intr = intr;
    cv.world_to_cam = pose;
    cv.image = std::move(rv.rgb);
    ds.views.push_back(std::move(cv));
    ds.depths.push_back(std::move(rv.depth));
  }
  return ds;
}

// Dataset directory layout, per scene:
//   <root>/<scene_id>/cameras.json, rgb/<idx>.png, depth/<idx>.pfm
// plus <root>/dataset.json with the train/heldout split.
inline void write_scene_dataset(const std::string& root, const SceneDataset& ds) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(root) / ds.scene_id;
  std::error_code ec;
  fs::create_directories(dir / "rgb", ec);
  fs::create_directories(dir / "depth", ec);
  if (ec) throw std::runtime_error("cannot create dataset directory " + dir.string());
  nlohmann::json j;
  const Intrinsics& intr = ds.views.at(0).intr;
  j["width"] = intr.width;
  j["height"] = intr.height;
  j["fx"] = intr.fx;
  j["fy"] = intr.fy;
  j["cx"] = intr.cx;
  j["cy"] = intr.cy;
  j["near"] = ds.near;
  j["far"] = ds.far;
  j["background"] = ds.background;
  nlohmann::json views = nlohmann::json::array();
  for (const CameraView& v : ds.views) {
    std::array<double, 16> m{};
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) m[static_cast<size_t>(r * 4 + c)] = v.world_to_cam.R[r * 3 + c];
    }
    m[3] = v.world_to_cam.t.x;
    m[7] = v.world_to_cam.t.y;
    m[11] = v.world_to_cam.t.z;
    m[15] = 1.0;
    views.push_back({{"world_to_cam", m}});
  }
  j["views"] = views;
  std::ofstream f(dir / "cameras.json");
  if (!f) throw std::runtime_error("cannot write " + (dir / "cameras.json").string());
  f << j.dump(1) << "\n";
  char name[16];
  for (size_t i = 0; i < ds.views.size(); ++i) {
    std::snprintf(name, sizeof(name), "%03zu", i);
    save_png((dir / "rgb" / (std::string(name) + ".png")).string(), ds.views[i].image);
    save_pfm((dir / "depth" / (std::string(name) + ".pfm")).string(), ds.depths[i]);
  }
}

inline SceneDataset load_scene_dataset(const std::string& root, const std::string& scene_id,
                                       bool with_depth = true) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(root) / scene_id;
  std::ifstream f(dir / "cameras.json");
  if (!f) throw std::runtime_error("cannot open " + (dir / "cameras.json").string());
  nlohmann::json j;
  f >> j;
  SceneDataset ds;
  ds.scene_id = scene_id;
  Intrinsics intr;
  intr.width = j.at("width");
  intr.height = j.at("height");
  intr.fx = j.at("fx");
  intr.fy = j.at("fy");
  intr.cx = j.at("cx");
  intr.cy = j.at("cy");
  ds.near = j.at("near");
  ds.far = j.at("far");
  ds.background = j.at("background");
  char name[16];
  size_t idx = 0;
  for (const auto& jv : j.at("views")) {
    const std::array<double, 16> m = jv.at("world_to_cam");
    CameraView cv;
    cv.intr = intr;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) cv.world_to_cam.R[r * 3 + c] = m[static_cast<size_t>(r * 4 + c)];
    cv.world_to_cam.t = {m[3], m[7], m[11]};
    std::snprintf(name, sizeof(name), "%03zu", idx);
    cv.image = load_png((dir / "rgb" / (std::string(name) + ".png")).string());
    if (cv.image.shape[0] != intr.height || cv.image.shape[1] != intr.width)
      throw std::runtime_error("dataset: image size mismatch in " + scene_id);
    cv.validate();
    ds.views.push_back(std::move(cv));
    if (with_depth)
      ds.depths.push_back(load_pfm((dir / "depth" / (std::string(name) + ".pfm")).string()));
    ++idx;
  }
  return ds;
}

struct DatasetManifest {
  uint64_t seed = 0;
  int width = 0, height = 0, views = 0;
  std::vector<std::string> train_scenes;
  std::vector<std::string> heldout_scenes;
};

inline void write_dataset_manifest(const std::string& root, const DatasetManifest& m) {
  nlohmann::json j;
  j["seed"] = m.seed;
  j["width"] = m.width;
  j["height"] = m.height;
  j["views"] = m.views;
  j["train"] = m.train_scenes;
  j["heldout"] = m.heldout_scenes;
  std::ofstream f(std::filesystem::path(root) / "dataset.json");
  if (!f) throw std::runtime_error("cannot write dataset.json under " + root);
  f << j.dump(1) << "\n";
}

inline DatasetManifest load_dataset_manifest(const std::string& root) {
  std::ifstream f(std::filesystem::path(root) / "dataset.json");
  if (!f) throw std::runtime_error("cannot open dataset.json under " + root);
  nlohmann::json j;
  f >> j;
  DatasetManifest m;
  m.seed = j.at("seed");
  m.width = j.at("width");
  m.height = j.at("height");
  m.views = j.at("views");
  m.train_scenes = j.at("train").get<std::vector<std::string>>();
  m.heldout_scenes = j.at("heldout").get<std::vector<std::string>>();
  return m;
}

// Generates n scenes (last `heldout_frac` of them held out), writes everything
// under `root`, and returns the manifest.
inline DatasetManifest generate_dataset(const std::string& root, int n_scenes, int views_per_scene,
                                        int w, int h, uint64_t seed,
                                        Difficulty difficulty = Difficulty::kMedium,
                                        double heldout_frac = 0.2) {
  if (w % 8 != 0 || h % 8 != 0)
    throw std::invalid_argument("generate_dataset: resolution must be divisible by 8");
  DatasetManifest m;
  m.seed = seed;
  m.width = w;
  m.height = h;
  m.views = views_per_scene;
  const int heldout = std::max(0, static_cast<int>(std::lround(n_scenes * heldout_frac)));
  char name[24];
  for (int s = 0; s < n_scenes; ++s) {
    std::snprintf(name, sizeof(name), "scene_%03d", s);
    uint64_t scene_seed = seed;
    splitmix64(scene_seed);
    const SceneSpec spec = make_scene(scene_seed + static_cast<uint64_t>(s), difficulty);
    SceneDataset ds = generate_scene_dataset(name, spec, views_per_scene, w, h,
                                             scene_seed + static_cast<uint64_t>(s));
    ds.split = s < n_scenes - heldout ? "train" : "heldout";
    write_scene_dataset(root, ds);
    (ds.split == "train" ? m.train_scenes : m.heldout_scenes).push_back(name);
  }
  write_dataset_manifest(root, m);
  return m;
}

}  // namespace gnfield
