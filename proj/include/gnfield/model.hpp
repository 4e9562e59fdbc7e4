#pragma once

#include <array>
#include <string>
#include <vector>

#include "gnfield/aggregator.hpp"
#include "gnfield/backbone.hpp"
#include "gnfield/field.hpp"
#include "gnfield/hypernet.hpp"
#include "gnfield/params.hpp"

namespace gnfield {

struct ModelConfig {
  FieldConfig field;
  int backbone_width = 8;
  AggregationMode agg_mode = AggregationMode::kFull;
  bool multi_layer = true;
  bool freeze_generators = false;
  double static_sharpness = 5.0;
  uint64_t init_seed = 0;
};

template <class S>
struct ForwardInputs {
  const SampleBatch* samples = nullptr;
  std::vector<const CameraView*> ref_views;
  std::array<double, 3> background{0, 0, 0};
  bool training = false;
  bool want_reconstruction = false;
  bool want_reference_colors = false;
  // Pre-extracted pyramid levels for exactly ref_views (each [N,C,Hl,Wl]);
  // skips the backbone, used by the chunked renderer.
  const std::array<Tensor<S>, 3>* cached_levels = nullptr;
};

template <class S>
struct ForwardOut {
  Var<S> color;         // [B,3]
  Var<S> weights;       // [B,K]
  Var<S> depth;         // [B]
  Var<S> alpha_logits;  // [B,K]
  std::array<Var<S>, 3> dynamic_w;      // per level, invalid in static-only mode
  std::array<bool, 3> dyn_active{};     // which dynamic_w entries are populated
  std::array<Var<S>, 3> filtered;       // H_l, indexed by level
  Var<S> reconstruction;             // [N,3,H,W] when requested
  Var<S> ref_images;                 // constant leaf [N,3,H,W]
  Tensor<S> reference_colors;        // [B,K,N,3] constant data
  Tensor<uint8_t> any_valid;         // [B,K]
  bool has_dynamic = false;
};

// The full scene-conditioned field: backbone features, dynamic-static
// aggregation, sampling filters, HyperNet-driven geometry/appearance stacks,
// and compositing.
template <class S>
class Model {
 public:
  ModelConfig cfg;
  ParamStore<S> store;

  explicit Model(const ModelConfig& c) : cfg(c) {
    cfg.field.validate();
    store.init_seed = cfg.init_seed;
    backbone_ = std::make_unique<Backbone<S>>(store, cfg.backbone_width, cfg.field.d_feat);
    aggregator_ = std::make_unique<Aggregator<S>>(store, cfg.field.d_feat);
    for (int l = 0; l < 3; ++l)
      filters_[l] = SamplingFilter<S>(store, "filter.l" + std::to_string(l),
                                      cfg.field.samples_per_ray, cfg.field.d_feat);
    const int pe_x_width = FieldConfig::encoded_width(cfg.field.pe_x);
    for (int i = 0; i < cfg.field.geo_layers; ++i) {
      const int d_in = i == 0 ? pe_x_width : cfg.field.hidden;
      geo_blocks_.emplace_back(store, "hyper.geo" + std::to_string(i), d_in, cfg.field.hidden,
                               cfg.field.d_feat, cfg.field.rank);
    }
    app_ = std::make_unique<AppBlock<S>>(store, "hyper.app", cfg.field.hidden, cfg.field.d_feat,
                                         cfg.field.rank, cfg.field.app_branches);
    const int d = cfg.field.hidden;
    a_head_w_ = store.add_linear_weight("field.a_head.w", d, 1);
    a_head_b_ = store.add_zeros("field.a_head.b", Shape{1});
    g_head_w_ = store.add_linear_weight("field.g_head.w", d, d);
    g_head_b_ = store.add_zeros("field.g_head.b", Shape{d});
    const int app_in = d + FieldConfig::encoded_width(cfg.field.pe_d);
    app_in_w_ = store.add_linear_weight("field.app_in.w", app_in, d);
    app_in_b_ = store.add_zeros("field.app_in.b", Shape{d});
    rgb_w_ = store.add_linear_weight("field.rgb.w", d, 3);
    rgb_b_ = store.add_zeros("field.rgb.b", Shape{3});
    if (cfg.freeze_generators) {
      for (Param<S>& p : store.all())
        if (p.name.find(".gen_") != std::string::npos) p.trainable = false;
    }
  }

  const Backbone<S>& backbone() const { return *backbone_; }
  const Aggregator<S>& aggregator() const { return *aggregator_; }
  const SamplingFilter<S>& filter(int level) const { return filters_[level]; }

  // Reference images as a [N,3,H,W] tensor.
  static Tensor<S> pack_images(const std::vector<const CameraView*>& views) {
    const int64_t N = static_cast<int64_t>(views.size());
    const int64_t H = views.at(0)->image.shape[0], W = views.at(0)->image.shape[1];
    Tensor<S> out(Shape{N, 3, H, W});
    for (int64_t n = 0; n < N; ++n) {
      const Tensor<float>& img = views[static_cast<size_t>(n)]->image;
      if (img.shape[0] != H || img.shape[1] != W)
        throw std::invalid_argument("pack_images: mixed image sizes");
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x)
          for (int64_t c = 0; c < 3; ++c)
            out[((n * 3 + c) * H + y) * W + x] = static_cast<S>(img.at(y, x, c));
    }
    return out;
  }

  ForwardOut<S> forward(Tape<S>& tape, Binder<S>& bind, const ForwardInputs<S>& in) {
    const SampleBatch& sb = *in.samples;
    const int64_t B = sb.num_rays(), K = sb.samples_per_ray();
    ForwardOut<S> out;

    // Reference features
    typename Backbone<S>::Features feats;
    if (in.cached_levels) {
      if (in.want_reconstruction)
        throw std::invalid_argument("forward: reconstruction needs a live backbone pass");
      for (int l = 0; l < 3; ++l)
        feats.level[l] = make_const(tape, (*in.cached_levels)[static_cast<size_t>(l)]);
    } else {
      Tensor<S> images = pack_images(in.ref_views);
      feats = backbone_->extract(bind, images);
      feats.level[0].tagged("backbone.level0");
      if (in.want_reconstruction) {
        out.ref_images = make_const(tape, images);
        out.reconstruction = backbone_->reconstruct(bind, feats).tagged("backbone.reconstruction");
      }
    }

    // Projections, masks, static weights
    const ViewProjections vp = project_samples(sb.positions, in.ref_views);
    const PointViewMask pm = transpose_validity(vp);
    out.any_valid = pm.any_valid;
    Var<S> m_static = make_const(
        tape, static_view_weights<S>(sb, in.ref_views, pm, cfg.static_sharpness));

    // Per-level aggregation and filtering
    out.has_dynamic = cfg.agg_mode != AggregationMode::kStaticOnly;
    const std::array<int, 3> level_of = cfg.multi_layer ? std::array<int, 3>{0, 1, 2}
                                                        : std::array<int, 3>{0, 0, 0};
    std::array<Var<S>, 3> h_cache;
    std::array<bool, 3> computed{false, false, false};
    for (int slot = 0; slot < 3; ++slot) {
      const int l = level_of[static_cast<size_t>(slot)];
      if (computed[static_cast<size_t>(l)]) {
        out.filtered[static_cast<size_t>(slot)] = h_cache[static_cast<size_t>(l)];
        continue;
      }
      Var<S> f_l = query_level_features<S>(feats.level[l], vp, l, B, K);
      Var<S> m_dy;
      if (out.has_dynamic) {
        m_dy = aggregator_->dynamic_weights(bind, l, f_l, pm);
        out.dynamic_w[static_cast<size_t>(l)] = m_dy;
        out.dyn_active[static_cast<size_t>(l)] = true;
      }
      Var<S> stage1 = out.has_dynamic ? m_dy : m_static;
      Var<S> stage2 = cfg.agg_mode == AggregationMode::kDynamicOnly ? m_dy : m_static;
      Var<S> f_view = aggregator_->aggregate_level(bind, l, f_l, stage1, stage2, pm);
      Var<S> h = filters_[l].apply(bind, f_view);
      h_cache[static_cast<size_t>(l)] = h;
      computed[static_cast<size_t>(l)] = true;
      out.filtered[static_cast<size_t>(slot)] = h;
    }

    // Geometry stack on PE(x), H-scheduled coarse to dense
    Var<S> x = make_const(tape, positional_encode<S>(sb.positions, cfg.field.pe_x));
    for (int i = 0; i < cfg.field.geo_layers; ++i) {
      const int level = geo_level_for_layer(i);
      x = geo_blocks_[static_cast<size_t>(i)].forward(
          bind, x, out.filtered[static_cast<size_t>(level)]);
    }
    Var<S> a = reshape(add_rowvec(matmul(x, bind(a_head_w_)), bind(a_head_b_)), Shape{B, K});
    a = masked_fill(a, pm.any_valid, -std::numeric_limits<S>::infinity());
    out.alpha_logits = a.tagged("field.alpha_logits");
    Var<S> g = add_rowvec(matmul(x, bind(g_head_w_)), bind(g_head_b_));

    // Appearance stack with view directions
    Tensor<S> pe_d = positional_encode<S>(sb.directions, cfg.field.pe_d);  // [B,Dd]
    const int64_t Dd = pe_d.last_dim();
    Tensor<S> pe_d_bc(Shape{B, K, Dd});
    for (int64_t b = 0; b < B; ++b)
      for (int64_t k = 0; k < K; ++k)
        std::copy(pe_d.data() + b * Dd, pe_d.data() + (b + 1) * Dd,
                  pe_d_bc.data() + (b * K + k) * Dd);
    Var<S> app_in = concat_last(g, make_const(tape, std::move(pe_d_bc)));
    Var<S> f_app = relu(add_rowvec(matmul(app_in, bind(app_in_w_)), bind(app_in_b_)));
    Var<S> f_final = app_->forward(bind, f_app, out.filtered[0]);  // H_0 drives appearance
    Var<S> c =
        sigmoid(add_rowvec(matmul(f_final, bind(rgb_w_)), bind(rgb_b_))).tagged("field.colors");

    // Volume rendering
    Var<S> w = hitting_weights(out.alpha_logits).tagged("field.weights");
    RenderVars<S> rv = composite(w, c, sb.depths, in.background, sb.far);
    out.color = rv.color.tagged("field.color");
    out.weights = rv.weights;
    out.depth = rv.depth;

    if (in.want_reference_colors)
      out.reference_colors = sample_reference_colors<S>(in.ref_views, vp, B, K);
    return out;
  }

 private:
  std::unique_ptr<Backbone<S>> backbone_;
  std::unique_ptr<Aggregator<S>> aggregator_;
  std::array<SamplingFilter<S>, 3> filters_;
  std::vector<GeoBlock<S>> geo_blocks_;
  std::unique_ptr<AppBlock<S>> app_;
  int a_head_w_ = -1, a_head_b_ = -1, g_head_w_ = -1, g_head_b_ = -1;
  int app_in_w_ = -1, app_in_b_ = -1, rgb_w_ = -1, rgb_b_ = -1;
};

}  // namespace gnfield
