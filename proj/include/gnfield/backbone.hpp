#pragma once

#include <array>
#include <string>
#include <vector>

#include "gnfield/camera.hpp"
#include "gnfield/nn_ops.hpp"
#include "gnfield/params.hpp"
#include "gnfield/sampling.hpp"

namespace gnfield {

// Multi-scale reference feature extractor. Encoder downsamples three times
// (strided conv), the decoder upsamples with skip concats and emits levels
// l = 2,1,0 at 1/8, 1/4, 1/2 resolution, each d_feat channels wide. A small
// reconstruction head (one more upsampling) exists only for the backbone loss.
template <class S>
class Backbone {
 public:
  Backbone(ParamStore<S>& store, int width, int d_feat) : w_(width), d_feat_(d_feat) {
    auto conv = [&](const std::string& name, int ci, int co) {
      ConvBlock c;
      c.w = store.add_conv_weight("backbone." + name + ".w", co, ci, 3);
      c.b = store.add_zeros("backbone." + name + ".b", Shape{co});
      c.g = store.add_full("backbone." + name + ".in_g", Shape{co}, S(1));
      c.be = store.add_zeros("backbone." + name + ".in_b", Shape{co});
      return c;
    };
    auto head = [&](const std::string& name, int ci, int co) {
      Head h;
      h.w = store.add_linear_weight("backbone." + name + ".w", ci, co);
      h.b = store.add_zeros("backbone." + name + ".b", Shape{co});
      return h;
    };
    enc0a_ = conv("enc0a", 3, w_);
    enc0b_ = conv("enc0b", w_, w_);
    down1_ = conv("down1", w_, 2 * w_);
    enc1a_ = conv("enc1a", 2 * w_, 2 * w_);
    enc1b_ = conv("enc1b", 2 * w_, 2 * w_);
    down2_ = conv("down2", 2 * w_, 4 * w_);
    enc2a_ = conv("enc2a", 4 * w_, 4 * w_);
    enc2b_ = conv("enc2b", 4 * w_, 4 * w_);
    down3_ = conv("down3", 4 * w_, 4 * w_);
    enc3a_ = conv("enc3a", 4 * w_, 4 * w_);
    enc3b_ = conv("enc3b", 4 * w_, 4 * w_);
    dec1_ = conv("dec1", 8 * w_, 4 * w_);  // up(/8) ++ skip(/4)
    dec0_ = conv("dec0", 6 * w_, 2 * w_);  // up(/4) ++ skip(/2)
    head2_ = head("head2", 4 * w_, d_feat_);
    head1_ = head("head1", 4 * w_, d_feat_);
    head0_ = head("head0", 2 * w_, d_feat_);
    recon1_ = conv("recon1", 2 * w_, w_);
    recon_head_ = head("recon_head", w_, 3);
  }

  struct Features {
    std::array<Var<S>, 3> level;  // level[l]: [N, d_feat, H/2^{l+1}, W/2^{l+1}]
    Var<S> trunk_half;            // decoder trunk at 1/2, feeds reconstruction
    int64_t in_h = 0, in_w = 0;   // original (pre-pad) size
  };

  // images: [N,3,H,W]; H,W are padded up to a multiple of 8 if needed.
  Features extract(Binder<S>& bind, const Tensor<S>& images) const {
    Tensor<S> padded = pad_to_multiple8(images);
    Var<S> x = make_const(bind.tape(), std::move(padded));
    auto block = [&](Var<S> in, const ConvBlock& c, int stride) {
      Var<S> y = conv3x3_reflect(in, bind(c.w), bind(c.b), stride);
      y = instance_norm(y, bind(c.g), bind(c.be));
      return relu(y);
    };
    Var<S> e0 = block(block(x, enc0a_, 1), enc0b_, 1);
    Var<S> e1 = block(down_in(e0, down1_, bind), enc1a_, 1);
    e1 = block(e1, enc1b_, 1);
    Var<S> e2 = block(down_in(e1, down2_, bind), enc2a_, 1);
    e2 = block(e2, enc2b_, 1);
    Var<S> e3 = block(down_in(e2, down3_, bind), enc3a_, 1);
    e3 = block(e3, enc3b_, 1);

    Var<S> d1 = block(concat_channels(upsample2x(e3), e2), dec1_, 1);
    Var<S> d0 = block(concat_channels(upsample2x(d1), e1), dec0_, 1);

    Features f;
    f.level[2] = conv1x1(e3, bind(head2_.w), bind(head2_.b));
    f.level[1] = conv1x1(d1, bind(head1_.w), bind(head1_.b));
    f.level[0] = conv1x1(d0, bind(head0_.w), bind(head0_.b));
    f.trunk_half = d0;
    f.in_h = images.shape[2];
    f.in_w = images.shape[3];
    return f;
  }

  // One extra upsampling plus a small head; output in [0,1] via sigmoid,
  // cropped back to the original size.
  Var<S> reconstruct(Binder<S>& bind, const Features& f) const {
    Var<S> y = upsample2x(f.trunk_half);
    y = conv3x3_reflect(y, bind(recon1_.w), bind(recon1_.b), 1);
    y = instance_norm(y, bind(recon1_.g), bind(recon1_.be));
    y = relu(y);
    y = conv1x1(y, bind(recon_head_.w), bind(recon_head_.b));
    y = sigmoid(y);
    return crop2d(y, f.in_h, f.in_w);
  }

  int d_feat() const { return d_feat_; }

  // Full-resolution pixel coordinate -> level-l grid coordinate.
  static double level_coord(double pix, int level) {
    const double s = static_cast<double>(1 << (level + 1));
    return (pix + 0.5) / s - 0.5;
  }

 private:
  struct ConvBlock {
    int w = -1, b = -1, g = -1, be = -1;
  };
  struct Head {
    int w = -1, b = -1;
  };
  int w_, d_feat_;
  ConvBlock enc0a_, enc0b_, down1_, enc1a_, enc1b_, down2_, enc2a_, enc2b_, down3_, enc3a_,
      enc3b_, dec1_, dec0_, recon1_;
  Head head2_, head1_, head0_, recon_head_;

  Var<S> down_in(Var<S> x, const ConvBlock& c, Binder<S>& bind) const {
    Var<S> y = conv3x3_reflect(x, bind(c.w), bind(c.b), 2);
    y = instance_norm(y, bind(c.g), bind(c.be));
    return relu(y);
  }

  static Tensor<S> pad_to_multiple8(const Tensor<S>& images) {
    const int64_t N = images.shape[0], C = images.shape[1];
    const int64_t H = images.shape[2], W = images.shape[3];
    const int64_t Hp = (H + 7) / 8 * 8, Wp = (W + 7) / 8 * 8;
    if (Hp == H && Wp == W) return images;
    Tensor<S> out(Shape{N, C, Hp, Wp});
    for (int64_t nc = 0; nc < N * C; ++nc)
      for (int64_t i = 0; i < Hp; ++i) {
        const int64_t si = detail::reflect_idx(i, H);
        for (int64_t j = 0; j < Wp; ++j)
          out[(nc * Hp + i) * Wp + j] = images[(nc * H + si) * W + detail::reflect_idx(j, W)];
      }
    return out;
  }

  static Var<S> concat_channels(Var<S> a, Var<S> b) {
    // [N,Ca,H,W] ++ [N,Cb,H,W] along channels
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3])
      throw std::invalid_argument("concat_channels: spatial mismatch");
    const int64_t N = as[0], Ca = as[1], Cb = bs[1], HW = as[2] * as[3];
    Tape<S>& t = *a.tape;
    Tensor<S> y(Shape{as[0], Ca + Cb, as[2], as[3]});
    const Tensor<S>&av = a.val(), &bv = b.val();
    for (int64_t n = 0; n < N; ++n) {
      std::copy(av.data() + n * Ca * HW, av.data() + (n + 1) * Ca * HW,
                y.data() + n * (Ca + Cb) * HW);
      std::copy(bv.data() + n * Cb * HW, bv.data() + (n + 1) * Cb * HW,
                y.data() + n * (Ca + Cb) * HW + Ca * HW);
    }
    int id = t.push(std::move(y), a.requires_grad() || b.requires_grad());
    Var<S> out{&t, id};
    if (out.requires_grad()) {
      t.nodes[id].back = [ai = a.id, bi = b.id, id, N, Ca, Cb, HW](Tape<S>& t) {
        const Tensor<S>& dy = t.nodes[id].grad;
        if (t.nodes[ai].requires_grad) {
          Tensor<S>& da = t.grad_of(ai);
          for (int64_t n = 0; n < N; ++n)
            for (int64_t i = 0; i < Ca * HW; ++i)
              da[n * Ca * HW + i] += dy[n * (Ca + Cb) * HW + i];
        }
        if (t.nodes[bi].requires_grad) {
          Tensor<S>& db = t.grad_of(bi);
          for (int64_t n = 0; n < N; ++n)
            for (int64_t i = 0; i < Cb * HW; ++i)
              db[n * Cb * HW + i] += dy[n * (Ca + Cb) * HW + Ca * HW + i];
        }
      };
    }
    return out;
  }
};

// Projections of the sample points into every reference view: full-resolution
// pixel coordinates plus the validity mask (front of camera and in bounds).
struct ViewProjections {
  Tensor<double> uv;       // [N,M,2]
  Tensor<uint8_t> valid;   // [N,M]
  int64_t n_views = 0, n_points = 0;
};

inline ViewProjections project_samples(const Tensor<double>& positions /*[B,K,3]*/,
                                       const std::vector<const CameraView*>& views) {
  const int64_t M = positions.shape[0] * positions.shape[1];
  const int64_t N = static_cast<int64_t>(views.size());
  ViewProjections vp;
  vp.uv = Tensor<double>(Shape{N, M, 2});
  vp.valid = Tensor<uint8_t>(Shape{N, M});
  vp.n_views = N;
  vp.n_points = M;
  for (int64_t n = 0; n < N; ++n) {
    const CameraView& cam = *views[static_cast<size_t>(n)];
    for (int64_t m = 0; m < M; ++m) {
      const Vec3 p{positions[m * 3], positions[m * 3 + 1], positions[m * 3 + 2]};
      const Projection pr = project(p, cam);
      vp.uv[(n * M + m) * 2] = pr.u;
      vp.uv[(n * M + m) * 2 + 1] = pr.v;
      vp.valid[n * M + m] = pr.front && pr.in_bounds ? 1 : 0;
    }
  }
  return vp;
}

// F_n(Pi_n(x)) for one pyramid level: bilinear features [B,K,N,d].
template <class S>
Var<S> query_level_features(Var<S> level_grid /*[N,C,Hl,Wl]*/, const ViewProjections& vp,
                            int level, int64_t B, int64_t K) {
  const int64_t N = vp.n_views, M = vp.n_points;
  Tensor<S> pts(Shape{N, M, 2});
  for (int64_t i = 0; i < N * M; ++i) {
    pts[i * 2] = static_cast<S>(Backbone<S>::level_coord(vp.uv[i * 2], level));
    pts[i * 2 + 1] = static_cast<S>(Backbone<S>::level_coord(vp.uv[i * 2 + 1], level));
  }
  Var<S> g = bilinear_gather_views(level_grid, pts, vp.valid);  // [M,N,C]
  const int64_t C = level_grid.shape()[1];
  return reshape(g, Shape{B, K, N, C});
}

// Ground-truth reference colors at the projections, zero for invalid views.
// Used by the dynamic-weights loss; plain data, not on the tape.
template <class S>
Tensor<S> sample_reference_colors(const std::vector<const CameraView*>& views,
                                  const ViewProjections& vp, int64_t B, int64_t K) {
  const int64_t N = vp.n_views, M = vp.n_points;
  Tensor<S> out(Shape{B, K, N, 3});
  for (int64_t n = 0; n < N; ++n) {
    const Tensor<float>& img = views[static_cast<size_t>(n)]->image;
    const int64_t W = img.shape[1], H = img.shape[0];
    for (int64_t m = 0; m < M; ++m) {
      if (!vp.valid[n * M + m]) continue;
      const double u = std::clamp(vp.uv[(n * M + m) * 2], 0.0, static_cast<double>(W - 1));
      const double v = std::clamp(vp.uv[(n * M + m) * 2 + 1], 0.0, static_cast<double>(H - 1));
      const int64_t x0 = std::min(static_cast<int64_t>(u), W - 2);
      const int64_t y0 = std::min(static_cast<int64_t>(v), H - 2);
      const double fu = u - static_cast<double>(x0), fv = v - static_cast<double>(y0);
      for (int64_t c = 0; c < 3; ++c) {
        const double val = (1 - fu) * (1 - fv) * img.at(y0, x0, c) +
                           fu * (1 - fv) * img.at(y0, x0 + 1, c) +
                           (1 - fu) * fv * img.at(y0 + 1, x0, c) +
                           fu * fv * img.at(y0 + 1, x0 + 1, c);
        out[(m * N + n) * 3 + c] = static_cast<S>(val);
      }
    }
  }
  return out;
}

}  // namespace gnfield
