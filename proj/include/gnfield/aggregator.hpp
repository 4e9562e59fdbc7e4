#pragma once

#include <string>

#include "gnfield/backbone.hpp"
#include "gnfield/nn_ops.hpp"
#include "gnfield/params.hpp"

namespace gnfield {

enum class AggregationMode { kFull, kStaticOnly, kDynamicOnly };

inline AggregationMode aggregation_mode_from_string(const std::string& s) {
  if (s == "full") return AggregationMode::kFull;
  if (s == "static_only") return AggregationMode::kStaticOnly;
  if (s == "dynamic_only") return AggregationMode::kDynamicOnly;
  throw std::invalid_argument("unknown aggregation mode: " + s);
}

inline std::string to_string(AggregationMode m) {
  switch (m) {
    case AggregationMode::kFull: return "full";
    case AggregationMode::kStaticOnly: return "static_only";
    default: return "dynamic_only";
  }
}

// Validity mask in [point, view] layout, plus the any-valid flag per point.
struct PointViewMask {
  Tensor<uint8_t> valid;      // [M,N]
  Tensor<uint8_t> any_valid;  // [M]
};

inline PointViewMask transpose_validity(const ViewProjections& vp) {
  PointViewMask pm;
  const int64_t N = vp.n_views, M = vp.n_points;
  pm.valid = Tensor<uint8_t>(Shape{M, N});
  pm.any_valid = Tensor<uint8_t>(Shape{M});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t m = 0; m < M; ++m) {
      pm.valid[m * N + n] = vp.valid[n * M + m];
      pm.any_valid[m] |= vp.valid[n * M + m];
    }
  return pm;
}

// Geometric view weights: softmax over views of sharpness * cos(theta_n),
// where theta_n is the angle between the camera->point direction and the
// target ray direction. Pure geometry, so a constant for the tape.
template <class S>
Tensor<S> static_view_weights(const SampleBatch& samples,
                              const std::vector<const CameraView*>& views,
                              const PointViewMask& pm, double sharpness) {
  const int64_t B = samples.num_rays(), K = samples.samples_per_ray();
  const int64_t N = static_cast<int64_t>(views.size());
  Tensor<S> w(Shape{B, K, N});
  std::vector<Vec3> centers(static_cast<size_t>(N));
  for (int64_t n = 0; n < N; ++n)
    centers[static_cast<size_t>(n)] = views[static_cast<size_t>(n)]->world_to_cam.camera_center();
  std::vector<double> logits(static_cast<size_t>(N));
  for (int64_t b = 0; b < B; ++b) {
    const Vec3 dir{samples.directions.at(b, 0), samples.directions.at(b, 1),
                   samples.directions.at(b, 2)};
    for (int64_t k = 0; k < K; ++k) {
      const int64_t m = b * K + k;
      const Vec3 p{samples.positions.at(b, k, 0), samples.positions.at(b, k, 1),
                   samples.positions.at(b, k, 2)};
      double mx = -1e300;
      bool any = false;
      for (int64_t n = 0; n < N; ++n) {
        if (!pm.valid[m * N + n]) continue;
        const Vec3 to_point = p - centers[static_cast<size_t>(n)];
        const double nn = to_point.norm();
        const double cos_theta = nn > 1e-12 ? to_point.dot(dir) / nn : 1.0;
        logits[static_cast<size_t>(n)] = sharpness * cos_theta;
        mx = std::max(mx, logits[static_cast<size_t>(n)]);
        any = true;
      }
      if (!any) {
        for (int64_t n = 0; n < N; ++n) w.at(b, k, n) = static_cast<S>(1.0 / N);
        continue;
      }
      double denom = 0;
      for (int64_t n = 0; n < N; ++n)
        if (pm.valid[m * N + n]) denom += std::exp(logits[static_cast<size_t>(n)] - mx);
      for (int64_t n = 0; n < N; ++n)
        w.at(b, k, n) =
            pm.valid[m * N + n]
                ? static_cast<S>(std::exp(logits[static_cast<size_t>(n)] - mx) / denom)
                : S(0);
    }
  }
  return w;
}

// Multi-layer dynamic-static aggregation: per level, fuse the N per-view
// sampled features into one per-sample feature of the same width.
template <class S>
class Aggregator {
 public:
  Aggregator(ParamStore<S>& store, int d_feat) : d_(d_feat) {
    if (d_ % 2 != 0) throw std::invalid_argument("aggregator: d_feat must be even");
    for (int l = 0; l < 3; ++l) {
      const std::string p = "agg.l" + std::to_string(l) + ".";
      Level& lv = lvl_[l];
      lv.d0w = store.add_linear_weight(p + "dyn0.w", 2 * d_, d_);
      lv.d0b = store.add_zeros(p + "dyn0.b", Shape{d_});
      lv.d1w = store.add_linear_weight(p + "dyn1.w", d_, d_ / 2);
      lv.d1b = store.add_zeros(p + "dyn1.b", Shape{d_ / 2});
      lv.d2w = store.add_linear_weight(p + "dyn2.w", d_ / 2, 1);
      lv.d2b = store.add_zeros(p + "dyn2.b", Shape{1});
      lv.pw = store.add_linear_weight(p + "proj.w", 3 * d_, d_ / 2);
      lv.pb = store.add_zeros(p + "proj.b", Shape{d_ / 2});
    }
  }

  // Maxpool-MLP-softmax dynamic weights, one simplex row per (ray, sample).
  Var<S> dynamic_weights(Binder<S>& bind, int level, Var<S> feats /*[B,K,N,d]*/,
                         const PointViewMask& pm) const {
    const Level& lv = lvl_[level];
    const Shape& fs = feats.shape();
    const int64_t B = fs[0], K = fs[1], N = fs[2];
    Var<S> ctx = max_views(feats, pm.valid);                 // [B,K,d]
    Var<S> h = concat_last(feats, tile_middle(ctx, N));      // [B,K,N,2d]
    h = relu(add_rowvec(matmul(h, bind(lv.d0w)), bind(lv.d0b)));
    h = relu(add_rowvec(matmul(h, bind(lv.d1w)), bind(lv.d1b)));
    Var<S> logits = add_rowvec(matmul(h, bind(lv.d2w)), bind(lv.d2b));  // [B,K,N,1]
    logits = reshape(logits, Shape{B * K, N});
    Var<S> w = softmax_masked(logits, pm.valid);
    return reshape(w, Shape{B, K, N});
  }

  // Weighted mean/variance with the first-stage weights, halving projection,
  // weighted mean/variance with the second-stage weights, plus the max
  // feature. Both weight tensors live on the simplex per (b,k).
  Var<S> aggregate_level(Binder<S>& bind, int level, Var<S> feats /*[B,K,N,d]*/,
                         Var<S> stage1_w /*[B,K,N]*/, Var<S> stage2_w /*[B,K,N]*/,
                         const PointViewMask& pm) const {
    const Level& lv = lvl_[level];
    const Shape& fs = feats.shape();
    if (fs[3] != d_)
      throw std::invalid_argument("aggregate_level: feature width " + fs.str() + " expected d=" +
                                  std::to_string(d_));
    const int64_t N = fs[2];
    Var<S> mu = weighted_sum_views(feats, stage1_w);  // [B,K,d]
    Var<S> ex2 = weighted_sum_views(square(feats), stage1_w);
    Var<S> var = clamp_min0(sub(ex2, square(mu)));
    Var<S> cat = concat_last(feats, tile_middle(mu, N), tile_middle(var, N));  // [B,K,N,3d]
    Var<S> proj = relu(add_rowvec(matmul(cat, bind(lv.pw)), bind(lv.pb)));     // [B,K,N,d/2]
    Var<S> mu2 = weighted_sum_views(proj, stage2_w);
    Var<S> ex2b = weighted_sum_views(square(proj), stage2_w);
    Var<S> var2 = clamp_min0(sub(ex2b, square(mu2)));
    Var<S> fmax = max_views(feats, pm.valid);  // zero for all-invalid rows
    return add(concat_last(mu2, var2), fmax);
  }

 private:
  struct Level {
    int d0w = -1, d0b = -1, d1w = -1, d1b = -1, d2w = -1, d2b = -1, pw = -1, pb = -1;
  };
  Level lvl_[3];
  int d_;
};

}  // namespace gnfield
