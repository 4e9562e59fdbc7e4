#pragma once

#include <string>
#include <vector>

#include "gnfield/nn_ops.hpp"
#include "gnfield/params.hpp"

namespace gnfield {

// Graph-style filter over the K samples of a ray: a linear map along the
// sample axis realizing the K x K adjacency, then a linear map along the
// feature axis, plus the residual identity. K is fixed at construction.
template <class S>
class SamplingFilter {
 public:
  SamplingFilter() = default;
  SamplingFilter(ParamStore<S>& store, const std::string& prefix, int k, int d) : k_(k) {
    wk_ = store.add_linear_weight(prefix + ".adj.w", k, k);
    bk_ = store.add_zeros(prefix + ".adj.b", Shape{k});
    wf_ = store.add_linear_weight(prefix + ".feat.w", d, d);
    bf_ = store.add_zeros(prefix + ".feat.b", Shape{d});
  }

  Var<S> apply(Binder<S>& bind, Var<S> f /*[B,K,d]*/) const {
    if (f.shape()[1] != k_)
      throw std::invalid_argument("sampling_filter: got K=" + std::to_string(f.shape()[1]) +
                                  ", configured for K=" + std::to_string(k_));
    Var<S> y = linear_over_k(f, bind(wk_), bind(bk_));
    y = add_rowvec(matmul(y, bind(wf_)), bind(bf_));
    return add(y, f);
  }

  int configured_k() const { return k_; }

 private:
  int k_ = 0;
  int wk_ = -1, bk_ = -1, wf_ = -1, bf_ = -1;
};

// Per-sample generated parameters for one dynamic linear map, applied as
// x (W0 + U V) + b0 + bias_offset. U heads start at zero so the effective map
// equals W0 exactly at init; V heads carry random init so the product can
// leave zero under gradient descent.
template <class S>
struct DynamicLinear {
  Var<S> u;     // [G, d_in, r]
  Var<S> v;     // [G, r, d_out]
  Var<S> base;  // W0: [d_in, d_out]

  Var<S> apply(Var<S> x /*[..,d_in]*/) const {
    return add(matmul(x, base), bmm_rvec(bmm_rvec(x, u), v));
  }
};

namespace detail {
template <class S>
int add_zero_head(ParamStore<S>& store, const std::string& name, int64_t in, int64_t out) {
  return store.add_zeros(name, Shape{in, out});
}
}  // namespace detail

// DFiLM: sinusoidal activation with generated frequency and phase shift.
template <class S>
Var<S> dfilm_activate(Var<S> z, Var<S> freq, Var<S> shift) {
  return sin_op(add(mul(freq, z), shift));
}

// Geometry-branch HyperNet module: dynamic MLP + DFiLM + the original
// framework layer with norm/activation after it.
template <class S>
class GeoBlock {
 public:
  GeoBlock() = default;
  GeoBlock(ParamStore<S>& store, const std::string& prefix, int d_in, int d_out, int d_ctx, int r)
      : d_in_(d_in), d_out_(d_out), r_(r) {
    w0_ = store.add_linear_weight(prefix + ".w0", d_in, d_out);
    b0_ = store.add_zeros(prefix + ".b0", Shape{d_out});
    gu_w_ = detail::add_zero_head(store, prefix + ".gen_u.w", d_ctx, d_in * r);
    gu_b_ = store.add_zeros(prefix + ".gen_u.b", Shape{d_in * r});
    gv_w_ = store.add_linear_weight(prefix + ".gen_v.w", d_ctx, r * d_out);
    gv_b_ = store.add_zeros(prefix + ".gen_v.b", Shape{r * d_out});
    gb_w_ = detail::add_zero_head(store, prefix + ".gen_bias.w", d_ctx, d_out);
    gb_b_ = store.add_zeros(prefix + ".gen_bias.b", Shape{d_out});
    gf_w_ = detail::add_zero_head(store, prefix + ".gen_freq.w", d_ctx, d_out);
    gf_b_ = store.add_zeros(prefix + ".gen_freq.b", Shape{d_out});
    gs_w_ = detail::add_zero_head(store, prefix + ".gen_shift.w", d_ctx, d_out);
    gs_b_ = store.add_zeros(prefix + ".gen_shift.b", Shape{d_out});
    mlp_w_ = store.add_linear_weight(prefix + ".mlp.w", d_out, d_out);
    mlp_b_ = store.add_zeros(prefix + ".mlp.b", Shape{d_out});
    bn_g_ = store.add_full(prefix + ".bn.g", Shape{d_out}, S(1));
    bn_b_ = store.add_zeros(prefix + ".bn.b", Shape{d_out});
    bn_rm_ = store.add_state(prefix + ".bn.rm", Tensor<S>::zeros(Shape{d_out}));
    bn_rv_ = store.add_state(prefix + ".bn.rv", Tensor<S>::full(Shape{d_out}, S(1)));
  }

  struct Bundle {
    DynamicLinear<S> lin;
    Var<S> bias;   // b0 + offset, [..,d_out] per sample
    Var<S> freq;   // 1 + offset
    Var<S> shift;  // offset
  };

  Bundle generate(Binder<S>& bind, Var<S> h /*[B,K,d_ctx]*/) const {
    const Shape& hs = h.shape();
    const int64_t G = hs[0] * hs[1];
    Bundle b;
    b.lin.u = reshape(add_rowvec(matmul(h, bind(gu_w_)), bind(gu_b_)), Shape{G, d_in_, r_});
    b.lin.v = reshape(add_rowvec(matmul(h, bind(gv_w_)), bind(gv_b_)), Shape{G, r_, d_out_});
    b.lin.base = bind(w0_);
    b.bias = add_rowvec(add_rowvec(matmul(h, bind(gb_w_)), bind(gb_b_)), bind(b0_));
    b.freq = add_scalar(add_rowvec(matmul(h, bind(gf_w_)), bind(gf_b_)), S(1));
    b.shift = add_rowvec(matmul(h, bind(gs_w_)), bind(gs_b_));
    return b;
  }

  // relu(norm(MLP_l(DFiLM(W_H x + Bias_H))))
  Var<S> forward(Binder<S>& bind, Var<S> x /*[B,K,d_in]*/, Var<S> h /*[B,K,d_ctx]*/) const {
    const Bundle b = generate(bind, h);
    Var<S> pre = add(b.lin.apply(x), b.bias);
    Var<S> act = dfilm_activate(pre, b.freq, b.shift);
    Var<S> mid = add_rowvec(matmul(act, bind(mlp_w_)), bind(mlp_b_));
    Var<S> norm = batch_norm(mid, bind(bn_g_), bind(bn_b_), bind.store().at(bn_rm_).value,
                             bind.store().at(bn_rv_).value, bind.training());
    return relu(norm);
  }

  int d_out() const { return d_out_; }

 private:
  int d_in_ = 0, d_out_ = 0, r_ = 0;
  int w0_ = -1, b0_ = -1;
  int gu_w_ = -1, gu_b_ = -1, gv_w_ = -1, gv_b_ = -1;
  int gb_w_ = -1, gb_b_ = -1, gf_w_ = -1, gf_b_ = -1, gs_w_ = -1, gs_b_ = -1;
  int mlp_w_ = -1, mlp_b_ = -1, bn_g_ = -1, bn_b_ = -1, bn_rm_ = -1, bn_rv_ = -1;
};

// Appearance-branch HyperNet module: Z parallel progressive branches,
// weight-only (no DFiLM, no dynamic bias), summed with a residual and fed to
// the original MLP layer.
template <class S>
class AppBlock {
 public:
  AppBlock() = default;
  AppBlock(ParamStore<S>& store, const std::string& prefix, int d, int d_ctx, int r, int branches)
      : d_(d), d_ctx_(d_ctx), r_(r) {
    if (branches < 1) throw std::invalid_argument("app block: Z must be >= 1");
    for (int z = 0; z < branches; ++z) {
      const std::string p = prefix + ".z" + std::to_string(z);
      Branch br;
      br.w0 = store.add_linear_weight(p + ".w0", d, d);
      br.gu_w = detail::add_zero_head(store, p + ".gen_u.w", d_ctx, d * r);
      br.gu_b = store.add_zeros(p + ".gen_u.b", Shape{d * r});
      br.gv_w = store.add_linear_weight(p + ".gen_v.w", d_ctx, r * d);
      br.gv_b = store.add_zeros(p + ".gen_v.b", Shape{r * d});
      if (z > 0) {
        br.proj_w = store.add_linear_weight(p + ".gen_proj.w", 2 * d * r, d_ctx);
        br.proj_b = store.add_zeros(p + ".gen_proj.b", Shape{d_ctx});
      }
      branches_.push_back(br);
    }
    mlp_w_ = store.add_linear_weight(prefix + ".mlp.w", d, d);
    mlp_b_ = store.add_zeros(prefix + ".mlp.b", Shape{d});
  }

  // MLP(sum_z W_{T_z} x + x); branch z >= 1 generates its weight from the
  // previous branch's generated weight factors.
  Var<S> forward(Binder<S>& bind, Var<S> x /*[B,K,d]*/, Var<S> h0 /*[B,K,d_ctx]*/) const {
    const Shape& xs = x.shape();
    const int64_t B = xs[0], K = xs[1];
    const int64_t G = B * K;
    Var<S> acc = x;  // residual
    Var<S> ctx = h0;
    for (size_t z = 0; z < branches_.size(); ++z) {
      const Branch& br = branches_[z];
      if (z > 0) {
        ctx = add_rowvec(matmul(ctx, bind(br.proj_w)), bind(br.proj_b));
      }
      Var<S> u_flat = add_rowvec(matmul(ctx, bind(br.gu_w)), bind(br.gu_b));  // [B,K,d*r]
      Var<S> v_flat = add_rowvec(matmul(ctx, bind(br.gv_w)), bind(br.gv_b));  // [B,K,r*d]
      DynamicLinear<S> lin;
      lin.u = reshape(u_flat, Shape{G, d_, r_});
      lin.v = reshape(v_flat, Shape{G, r_, d_});
      lin.base = bind(br.w0);
      acc = add(acc, lin.apply(x));
      // next branch consumes this branch's generated weight factors
      ctx = reshape(concat_last(reshape(u_flat, Shape{B, K, d_ * r_}),
                                reshape(v_flat, Shape{B, K, r_ * d_})),
                    Shape{B, K, 2 * d_ * r_});
    }
    return relu(add_rowvec(matmul(acc, bind(mlp_w_)), bind(mlp_b_)));
  }

  int branch_count() const { return static_cast<int>(branches_.size()); }

 private:
  struct Branch {
    int w0 = -1;
    int gu_w = -1, gu_b = -1, gv_w = -1, gv_b = -1;
    int proj_w = -1, proj_b = -1;  // z >= 1 only
  };
  std::vector<Branch> branches_;
  int d_ = 0, d_ctx_ = 0, r_ = 0;
  int mlp_w_ = -1, mlp_b_ = -1;
};

}  // namespace gnfield
