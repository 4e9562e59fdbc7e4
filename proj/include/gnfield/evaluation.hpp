#pragma once

#include <chrono>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gnfield/config.hpp"
#include "gnfield/metrics.hpp"
#include "gnfield/model.hpp"
#include "gnfield/toytracer.hpp"

namespace gnfield {

// Per-view pyramid levels for a whole scene, extracted once and sliced per
// target so full-image rendering does not re-run the backbone per chunk.
template <class S>
struct SceneFeatureCache {
  std::array<Tensor<S>, 3> levels;  // [V, C, Hl, Wl]
};

template <class S>
SceneFeatureCache<S> build_feature_cache(Model<S>& model, const SceneDataset& scene) {
  Tape<S> tape;
  tape.grad_enabled = false;
  Binder<S> bind(tape, model.store, /*training=*/false);
  std::vector<const CameraView*> all;
  for (const CameraView& v : scene.views) all.push_back(&v);
  Tensor<S> images = Model<S>::pack_images(all);
  typename Backbone<S>::Features feats = model.backbone().extract(bind, images);
  SceneFeatureCache<S> cache;
  for (int l = 0; l < 3; ++l) cache.levels[static_cast<size_t>(l)] = feats.level[l].val();
  return cache;
}

template <class S>
std::array<Tensor<S>, 3> select_cached_views(const SceneFeatureCache<S>& cache,
                                             const std::vector<int>& view_indices) {
  std::array<Tensor<S>, 3> out;
  for (int l = 0; l < 3; ++l) {
    const Tensor<S>& src = cache.levels[static_cast<size_t>(l)];
    const int64_t per = src.numel() / src.shape[0];
    Shape s = src.shape;
    s.d[0] = static_cast<int64_t>(view_indices.size());
    out[static_cast<size_t>(l)] = Tensor<S>(s);
    for (size_t i = 0; i < view_indices.size(); ++i)
      std::copy(src.data() + view_indices[i] * per, src.data() + (view_indices[i] + 1) * per,
                out[static_cast<size_t>(l)].data() + static_cast<int64_t>(i) * per);
  }
  return out;
}

// N nearest views by camera-center distance, optionally excluding one index.
inline std::vector<int> nearest_views(const std::vector<CameraView>& views, const Vec3& center,
                                      int n, int exclude_idx) {
  std::vector<std::pair<double, int>> ranked;
  for (size_t i = 0; i < views.size(); ++i) {
    if (static_cast<int>(i) == exclude_idx) continue;
    ranked.push_back({(views[i].world_to_cam.camera_center() - center).norm(),
                      static_cast<int>(i)});
  }
  if (static_cast<int>(ranked.size()) < n)
    throw std::invalid_argument("nearest_views: not enough reference views");
  std::sort(ranked.begin(), ranked.end());
  std::vector<int> out;
  for (int i = 0; i < n; ++i) out.push_back(ranked[static_cast<size_t>(i)].second);
  return out;
}

// Deterministic full-image rendering: midpoint sampling, eval-mode
// normalization, rays processed in chunks.
template <class S>
RenderedView render_view(Model<S>& model, const SceneDataset& scene,
                         const SceneFeatureCache<S>& cache, const CameraView& target,
                         int exclude_view_idx, int n_references, int chunk_size, int stride = 1) {
  const int W = target.intr.width / stride, H = target.intr.height / stride;
  const std::vector<int> ref_idx = nearest_views(
      scene.views, target.world_to_cam.camera_center(), n_references, exclude_view_idx);
  const std::array<Tensor<S>, 3> levels = select_cached_views(cache, ref_idx);
  std::vector<const CameraView*> refs;
  for (int i : ref_idx) refs.push_back(&scene.views[static_cast<size_t>(i)]);

  RenderedView out;
  out.rgb = Tensor<float>(Shape{H, W, 3});
  out.depth = Tensor<float>(Shape{H, W});
  std::vector<std::pair<int, int>> pixels;
  pixels.reserve(static_cast<size_t>(W * H));
  for (int j = 0; j < H; ++j)
    for (int i = 0; i < W; ++i) pixels.push_back({i * stride, j * stride});

  Rng rng(0);  // jitter off; unused
  const int K = model.cfg.field.samples_per_ray;
  for (size_t at = 0; at < pixels.size(); at += static_cast<size_t>(chunk_size)) {
    const size_t end = std::min(pixels.size(), at + static_cast<size_t>(chunk_size));
    std::vector<std::pair<int, int>> chunk(pixels.begin() + static_cast<std::ptrdiff_t>(at),
                                           pixels.begin() + static_cast<std::ptrdiff_t>(end));
    const std::vector<Ray> rays = generate_rays(target, chunk, scene.near, scene.far);
    const SampleBatch sb = stratified_sample(rays, K, /*jitter=*/false, rng);
    Tape<S> tape;
    tape.grad_enabled = false;
    Binder<S> bind(tape, model.store, /*training=*/false);
    ForwardInputs<S> in;
    in.samples = &sb;
    in.ref_views = refs;
    in.background = scene.background;
    in.cached_levels = &levels;
    ForwardOut<S> fwd = model.forward(tape, bind, in);
    const Tensor<S>& color = fwd.color.val();
    const Tensor<S>& depth = fwd.depth.val();
    for (size_t b = 0; b < chunk.size(); ++b) {
      const int px = chunk[b].first / stride, py = chunk[b].second / stride;
      for (int c = 0; c < 3; ++c)
        out.rgb.at(py, px, c) = static_cast<float>(color[static_cast<int64_t>(b) * 3 + c]);
      out.depth.at(py, px) = static_cast<float>(depth[static_cast<int64_t>(b)]);
    }
  }
  return out;
}

struct EvalSceneMetrics {
  std::string id;
  double psnr = 0;
  double ssim = 0;
};

struct EvalReport {
  std::vector<EvalSceneMetrics> scenes;
  double mean_psnr = 0;
  double mean_ssim = 0;
  std::string config_hash;
  double wall_time_s = 0;
  double render_time_per_image_s = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["scenes"] = nlohmann::json::array();
    for (const auto& s : scenes)
      j["scenes"].push_back({{"id", s.id}, {"psnr", s.psnr}, {"ssim", s.ssim}});
    j["mean_psnr"] = mean_psnr;
    j["mean_ssim"] = mean_ssim;
    j["config_hash"] = config_hash;
    j["wall_time_s"] = wall_time_s;
    j["render_time_per_image_s"] = render_time_per_image_s;
    j["lpips"] = nullptr;  // reserved; no perceptual metric in this build
    return j;
  }
};

inline Tensor<float> subsample_image(const Tensor<float>& img, int stride) {
  if (stride == 1) return img;
  const int64_t H = img.shape[0] / stride, W = img.shape[1] / stride;
  Tensor<float> out(Shape{H, W, 3});
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x)
      for (int64_t c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y * stride, x * stride, c);
  return out;
}

// Per-scene means of per-view metrics, then the mean across scenes. Rendering
// every dataset view with itself excluded from the references.
template <class S>
EvalReport evaluate(Model<S>& model, const std::string& data_root,
                    const std::vector<std::string>& eval_scene_ids,
                    const std::vector<std::string>& train_scene_ids, const TrainConfig& cfg,
                    int stride = 1, int chunk_size = 2048) {
  const auto t_start = std::chrono::steady_clock::now();
  for (const std::string& id : eval_scene_ids)
    for (const std::string& tr : train_scene_ids)
      if (id == tr)
        throw std::invalid_argument("evaluate: scene " + id +
                                    " is in the training manifest (cross-scene protocol)");
  EvalReport report;
  report.config_hash = config_hash(cfg);
  int images = 0;
  for (const std::string& id : eval_scene_ids) {
    const SceneDataset scene = load_scene_dataset(data_root, id, /*with_depth=*/false);
    const SceneFeatureCache<S> cache = build_feature_cache(model, scene);
    double sum_psnr = 0, sum_ssim = 0;
    for (size_t v = 0; v < scene.views.size(); ++v) {
      const RenderedView rv =
          render_view(model, scene, cache, scene.views[v], static_cast<int>(v),
                      cfg.n_references, chunk_size, stride);
      const Tensor<float> gt = subsample_image(scene.views[v].image, stride);
      sum_psnr += psnr(rv.rgb, gt);
      sum_ssim += ssim(rv.rgb, gt);
      ++images;
    }
    EvalSceneMetrics m;
    m.id = id;
    m.psnr = sum_psnr / static_cast<double>(scene.views.size());
    m.ssim = sum_ssim / static_cast<double>(scene.views.size());
    report.scenes.push_back(m);
  }
  for (const auto& m : report.scenes) {
    report.mean_psnr += m.psnr;
    report.mean_ssim += m.ssim;
  }
  report.mean_psnr /= static_cast<double>(report.scenes.size());
  report.mean_ssim /= static_cast<double>(report.scenes.size());
  report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  report.render_time_per_image_s = images > 0 ? report.wall_time_s / images : 0;
  return report;
}

// Mean-pooled H_0 per sampled ray: one CSV row per (scene, ray).
template <class S>
void export_embeddings(Model<S>& model, const std::string& data_root,
                       const std::vector<std::string>& scene_ids, int rays_per_scene,
                       const std::string& out_csv, uint64_t seed, int n_references) {
  std::ofstream f(out_csv);
  if (!f) throw std::runtime_error("cannot write " + out_csv);
  f << "scene_id";
  for (int i = 0; i < model.cfg.field.d_feat; ++i) f << ",h" << i;
  f << "\n";
  f.precision(8);
  for (const std::string& id : scene_ids) {
    const SceneDataset scene = load_scene_dataset(data_root, id, /*with_depth=*/false);
    const SceneFeatureCache<S> cache = build_feature_cache(model, scene);
    Rng rng(seed, "embed:" + id);
    const int target_idx = static_cast<int>(rng.uniform_int(static_cast<int64_t>(scene.views.size())));
    const CameraView& target = scene.views[static_cast<size_t>(target_idx)];
    std::vector<std::pair<int, int>> pixels;
    for (int b = 0; b < rays_per_scene; ++b)
      pixels.push_back({static_cast<int>(rng.uniform_int(target.intr.width)),
                        static_cast<int>(rng.uniform_int(target.intr.height))});
    const std::vector<int> ref_idx =
        nearest_views(scene.views, target.world_to_cam.camera_center(), n_references, target_idx);
    const std::array<Tensor<S>, 3> levels = select_cached_views(cache, ref_idx);
    std::vector<const CameraView*> refs;
    for (int i : ref_idx) refs.push_back(&scene.views[static_cast<size_t>(i)]);
    const std::vector<Ray> rays = generate_rays(target, pixels, scene.near, scene.far);
    const SampleBatch sb = stratified_sample(rays, model.cfg.field.samples_per_ray,
                                             /*jitter=*/false, rng);
    Tape<S> tape;
    tape.grad_enabled = false;
    Binder<S> bind(tape, model.store, /*training=*/false);
    ForwardInputs<S> in;
    in.samples = &sb;
    in.ref_views = refs;
    in.background = scene.background;
    in.cached_levels = &levels;
    ForwardOut<S> fwd = model.forward(tape, bind, in);
    const Tensor<S>& h0 = fwd.filtered[0].val();  // [B,K,d]
    const int64_t B = h0.shape[0], K = h0.shape[1], D = h0.shape[2];
    for (int64_t b = 0; b < B; ++b) {
      f << id;
      for (int64_t d = 0; d < D; ++d) {
        double acc = 0;
        for (int64_t k = 0; k < K; ++k) acc += static_cast<double>(h0.at(b, k, d));
        f << "," << acc / static_cast<double>(K);
      }
      f << "\n";
    }
  }
}

}  // namespace gnfield
