#pragma once

#include <array>
#include <vector>

#include "gnfield/hypernet.hpp"
#include "gnfield/nn_ops.hpp"
#include "gnfield/sampling.hpp"

namespace gnfield {

struct FieldConfig {
  int samples_per_ray = 64;  // K
  int hidden = 32;           // d
  int geo_layers = 4;
  int app_branches = 2;  // Z
  int pe_x = 6;          // position encoding frequencies
  int pe_d = 4;          // direction encoding frequencies
  int rank = 4;          // generated-weight factorization rank
  int d_feat = 32;       // reference feature width (C_l)

  void validate() const {
    if (samples_per_ray < 2) throw std::invalid_argument("field: K must be >= 2");
    if (hidden < 8) throw std::invalid_argument("field: hidden width must be >= 8");
    if (app_branches < 1) throw std::invalid_argument("field: Z must be >= 1");
    if (geo_layers < 1) throw std::invalid_argument("field: need at least one geo layer");
  }

  static int encoded_width(int L) { return 3 * (2 * L + 1); }
};

// [x, sin(2^j pi x), cos(2^j pi x)]_{j<L} per coordinate; width 3(2L+1).
template <class S>
Tensor<S> positional_encode(const Tensor<double>& x, int L) {
  const int64_t C = x.last_dim();
  const int64_t R = x.rows2d();
  Shape out_shape = x.shape;
  out_shape.d[out_shape.nd - 1] = C * (2 * L + 1);
  Tensor<S> out(out_shape);
  constexpr double kPi = 3.141592653589793;
  for (int64_t r = 0; r < R; ++r)
    for (int64_t c = 0; c < C; ++c) {
      const double v = x[r * C + c];
      S* dst = out.data() + (r * C + c) * (2 * L + 1);
      dst[0] = static_cast<S>(v);
      double freq = kPi;
      for (int j = 0; j < L; ++j) {
        dst[1 + 2 * j] = static_cast<S>(std::sin(freq * v));
        dst[2 + 2 * j] = static_cast<S>(std::cos(freq * v));
        freq *= 2;
      }
    }
  return out;
}

// Geometry level schedule: layer i consumes H_{max(2-i, 0)}; with more layers
// than levels the densest level is reused.
inline int geo_level_for_layer(int layer) { return layer >= 2 ? 0 : 2 - layer; }

// alpha_i = sigmoid(a_i); w_i = alpha_i * prod_{j<i}(1 - alpha_j).
// -inf logits become exactly transparent samples.
template <class S>
Var<S> hitting_weights(Var<S> alpha_logits /*[B,K]*/) {
  return cumulative_hitting(sigmoid(alpha_logits));
}

template <class S>
struct RenderVars {
  Var<S> color;    // [B,3]
  Var<S> weights;  // [B,K]
  Var<S> depth;    // [B]
  Var<S> colors_per_sample;  // [B,K,3]
};

// C_hat = sum_i w_i c_i + (1 - sum w) * background;
// depth = sum_i w_i t_i + (1 - sum w) * far.
template <class S>
RenderVars<S> composite(Var<S> w /*[B,K]*/, Var<S> c /*[B,K,3]*/, const Tensor<double>& t_depths,
                        const std::array<double, 3>& background, double far) {
  Tape<S>& tape = *w.tape;
  const int64_t B = w.shape()[0], K = w.shape()[1];
  RenderVars<S> out;
  out.weights = w;
  out.colors_per_sample = c;
  Var<S> residual = mul_scalar(add_scalar(sum_last(w), S(-1)), S(-1));  // 1 - sum w, [B]
  Tensor<S> bg(Shape{3});
  for (int i = 0; i < 3; ++i) bg[i] = static_cast<S>(background[static_cast<size_t>(i)]);
  out.color = add(weighted_sum_views(c, w), outer_rows(residual, bg));
  Tensor<S> td(Shape{B, K, 1});
  for (int64_t i = 0; i < B * K; ++i) td[i] = static_cast<S>(t_depths[i]);
  Var<S> tvar = make_const(tape, std::move(td));
  Var<S> exp_depth = reshape(weighted_sum_views(tvar, w), Shape{B});
  out.depth = add(exp_depth, mul_scalar(residual, static_cast<S>(far)));
  return out;
}

}  // namespace gnfield
