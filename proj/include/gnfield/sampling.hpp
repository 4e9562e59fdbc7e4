#pragma once

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "gnfield/camera.hpp"
#include "gnfield/rng.hpp"
#include "gnfield/tensor.hpp"

namespace gnfield {

// B rays x K ordered samples along each ray.
struct SampleBatch {
  Tensor<double> positions;   // [B,K,3] world
  Tensor<double> depths;      // [B,K], strictly increasing t
  Tensor<double> gaps;        // [B,K], gap_i = t_{i+1}-t_i, last = far - t_K
  Tensor<double> directions;  // [B,3] unit ray directions
  double far = 0;

  int64_t num_rays() const { return depths.shape[0]; }
  int64_t samples_per_ray() const { return depths.shape[1]; }
};

// One uniform bin per sample: midpoints when jitter is off, uniform within the
// bin otherwise.
inline SampleBatch stratified_sample(const std::vector<Ray>& rays, int K, bool jitter, Rng& rng) {
  if (K < 2) throw std::invalid_argument("stratified_sample: K must be >= 2");
  const int64_t B = static_cast<int64_t>(rays.size());
  SampleBatch sb;
  sb.positions = Tensor<double>(Shape{B, K, 3});
  sb.depths = Tensor<double>(Shape{B, K});
  sb.gaps = Tensor<double>(Shape{B, K});
  sb.directions = Tensor<double>(Shape{B, 3});
  sb.far = B > 0 ? rays[0].far : 0;
  for (int64_t b = 0; b < B; ++b) {
    const Ray& r = rays[static_cast<size_t>(b)];
    const double bin = (r.far - r.near) / K;
    for (int k = 0; k < K; ++k) {
      const double u = jitter ? rng.uniform() : 0.5;
      const double t = r.near + (k + u) * bin;
      sb.depths.at(b, k) = t;
      const Vec3 p = r.origin + r.dir * t;
      sb.positions.at(b, k, 0) = p.x;
      sb.positions.at(b, k, 1) = p.y;
      sb.positions.at(b, k, 2) = p.z;
    }
    for (int k = 0; k < K; ++k) {
      sb.gaps.at(b, k) =
          (k + 1 < K ? sb.depths.at(b, k + 1) : r.far) - sb.depths.at(b, k);
    }
    sb.directions.at(b, 0) = r.dir.x;
    sb.directions.at(b, 1) = r.dir.y;
    sb.directions.at(b, 2) = r.dir.z;
  }
  return sb;
}

// One target view plus N reference views from the same scene.
struct PairBatch {
  std::string scene_id;
  int target_index = -1;
  std::vector<int> reference_indices;
  std::vector<std::pair<int, int>> pixels;  // (i, j) target pixels
  Tensor<double> gt_colors;                 // [B,3]
};

// Ranks other views by camera-center distance to the target and draws N
// references uniformly from the P*N nearest; the target itself is excluded.
inline std::vector<int> pick_reference_views(const std::vector<CameraView>& views,
                                             int target_index, int N, int P, Rng& rng) {
  const int total = static_cast<int>(views.size());
  if (total < P * N + 1)
    throw std::invalid_argument("pick_reference_views: scene has " + std::to_string(total) +
                                " views, needs >= " + std::to_string(P * N + 1));
  const Vec3 tc = views[static_cast<size_t>(target_index)].world_to_cam.camera_center();
  std::vector<std::pair<double, int>> ranked;
  for (int i = 0; i < total; ++i) {
    if (i == target_index) continue;
    const double d = (views[static_cast<size_t>(i)].world_to_cam.camera_center() - tc).norm();
    ranked.push_back({d, i});
  }
  std::sort(ranked.begin(), ranked.end());
  const int pool = std::min<int>(P * N, static_cast<int>(ranked.size()));
  std::vector<int> candidates(static_cast<size_t>(pool));
  for (int i = 0; i < pool; ++i) candidates[static_cast<size_t>(i)] = ranked[i].second;
  // partial Fisher-Yates for N distinct picks
  for (int i = 0; i < N; ++i) {
    const int j = i + static_cast<int>(rng.uniform_int(pool - i));
    std::swap(candidates[static_cast<size_t>(i)], candidates[static_cast<size_t>(j)]);
  }
  candidates.resize(static_cast<size_t>(N));
  return candidates;
}

inline PairBatch sample_pair_batch(const std::string& scene_id,
                                   const std::vector<CameraView>& views, int N, int P, int b_rays,
                                   Rng& rng) {
  PairBatch pb;
  pb.scene_id = scene_id;
  pb.target_index = static_cast<int>(rng.uniform_int(static_cast<int64_t>(views.size())));
  pb.reference_indices = pick_reference_views(views, pb.target_index, N, P, rng);
  const CameraView& tv = views[static_cast<size_t>(pb.target_index)];
  pb.pixels.reserve(static_cast<size_t>(b_rays));
  pb.gt_colors = Tensor<double>(Shape{b_rays, 3});
  for (int b = 0; b < b_rays; ++b) {
    const int i = static_cast<int>(rng.uniform_int(tv.intr.width));
    const int j = static_cast<int>(rng.uniform_int(tv.intr.height));
    pb.pixels.push_back({i, j});
    for (int c = 0; c < 3; ++c)
      pb.gt_colors.at(b, c) = static_cast<double>(tv.image.at(j, i, c));
  }
  return pb;
}

}  // namespace gnfield
