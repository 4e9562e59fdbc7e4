#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "gnfield/autodiff.hpp"

namespace gnfield {

namespace detail {

// Reflection index without edge repeat: -1 -> 1, H -> H-2.
inline int64_t reflect_idx(int64_t i, int64_t n) {
  if (i < 0) i = -i;
  if (i >= n) i = 2 * n - 2 - i;
  return i;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv 3x3 with reflection padding 1, stride 1 or 2. x: [N,C,H,W],
// w: [Cout,Cin,3,3], b: [Cout].
// ---------------------------------------------------------------------------
template <class S>
Var<S> conv3x3_reflect(Var<S> x, Var<S> w, Var<S> b, int stride) {
  Tape<S>& t = *x.tape;
  const Shape& xs = x.shape();
  const int64_t N = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
  const Shape& ws = w.shape();
  if (ws.nd != 4 || ws[1] != Ci || ws[2] != 3 || ws[3] != 3)
    throw std::invalid_argument("conv3x3: weight shape " + ws.str() + " vs input " + xs.str());
  const int64_t Co = ws[0];
  const int64_t Ho = (H - 1) / stride + 1;
  const int64_t Wo = (W - 1) / stride + 1;
  const int64_t patch = Ci * 9;

  auto im2col = [=](const S* img, S* col) {
    // col: [patch, Ho*Wo]
    for (int64_t c = 0; c < Ci; ++c) {
      const S* plane = img + c * H * W;
      for (int64_t ky = 0; ky < 3; ++ky)
        for (int64_t kx = 0; kx < 3; ++kx) {
          S* row = col + ((c * 3 + ky) * 3 + kx) * (Ho * Wo);
          for (int64_t oy = 0; oy < Ho; ++oy) {
            const int64_t sy = detail::reflect_idx(oy * stride + ky - 1, H);
            const S* src = plane + sy * W;
            for (int64_t ox = 0; ox < Wo; ++ox) {
              const int64_t sx = detail::reflect_idx(ox * stride + kx - 1, W);
              row[oy * Wo + ox] = src[sx];
            }
          }
        }
    }
  };

  Tensor<S> y(Shape{N, Co, Ho, Wo});
  {
    detail::ECMap<S> Wm(w.val().data(), Co, patch);
    std::vector<S> col(static_cast<size_t>(patch * Ho * Wo));
    for (int64_t n = 0; n < N; ++n) {
      im2col(x.val().data() + n * Ci * H * W, col.data());
      detail::ECMap<S> C(col.data(), patch, Ho * Wo);
      detail::EMap<S> Y(y.data() + n * Co * Ho * Wo, Co, Ho * Wo);
      Y.noalias() = Wm * C;
      for (int64_t o = 0; o < Co; ++o) Y.row(o).array() += b.val()[o];
    }
  }
  int id = t.push(std::move(y), x.requires_grad() || w.requires_grad() || b.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [=, xi = x.id, wi = w.id, bi = b.id](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      const bool need_x = t.nodes[xi].requires_grad;
      const bool need_w = t.nodes[wi].requires_grad;
      const bool need_b = t.nodes[bi].requires_grad;
      Tensor<S>*dx = nullptr, *dw = nullptr, *db = nullptr;
      if (need_x) dx = &t.grad_of(xi);
      if (need_w) dw = &t.grad_of(wi);
      if (need_b) db = &t.grad_of(bi);
      detail::ECMap<S> Wm(t.nodes[wi].val.data(), Co, patch);
      std::vector<S> col(static_cast<size_t>(patch * Ho * Wo));
      std::vector<S> dcol(static_cast<size_t>(patch * Ho * Wo));
      for (int64_t n = 0; n < N; ++n) {
        detail::ECMap<S> dY(dy.data() + n * Co * Ho * Wo, Co, Ho * Wo);
        if (need_w || need_x) im2col(t.nodes[xi].val.data() + n * Ci * H * W, col.data());
        if (need_w) {
          detail::ECMap<S> C(col.data(), patch, Ho * Wo);
          detail::EMap<S> dW(dw->data(), Co, patch);
          dW.noalias() += dY * C.transpose();
        }
        if (need_b) {
          for (int64_t o = 0; o < Co; ++o) (*db)[o] += dY.row(o).sum();
        }
        if (need_x) {
          detail::EMap<S> dC(dcol.data(), patch, Ho * Wo);
          dC.noalias() = Wm.transpose() * dY;
          S* dimg = dx->data() + n * Ci * H * W;
          for (int64_t c = 0; c < Ci; ++c) {
            S* plane = dimg + c * H * W;
            for (int64_t ky = 0; ky < 3; ++ky)
              for (int64_t kx = 0; kx < 3; ++kx) {
                const S* row = dcol.data() + ((c * 3 + ky) * 3 + kx) * (Ho * Wo);
                for (int64_t oy = 0; oy < Ho; ++oy) {
                  const int64_t sy = detail::reflect_idx(oy * stride + ky - 1, H);
                  for (int64_t ox = 0; ox < Wo; ++ox) {
                    const int64_t sx = detail::reflect_idx(ox * stride + kx - 1, W);
                    plane[sy * W + sx] += row[oy * Wo + ox];
                  }
                }
              }
          }
        }
      }
    };
  }
  return out;
}

// 1x1 convolution. x: [N,C,H,W], w: [Cin,Cout], b: [Cout].
template <class S>
Var<S> conv1x1(Var<S> x, Var<S> w, Var<S> b) {
  Tape<S>& t = *x.tape;
  const Shape& xs = x.shape();
  const int64_t N = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
  if (w.shape()[0] != Ci) throw std::invalid_argument("conv1x1: channel mismatch");
  const int64_t Co = w.shape()[1];
  Tensor<S> y(Shape{N, Co, H, W});
  const int64_t HW = H * W;
  {
    detail::ECMap<S> Wm(w.val().data(), Ci, Co);
    for (int64_t n = 0; n < N; ++n) {
      detail::ECMap<S> X(x.val().data() + n * Ci * HW, Ci, HW);
      detail::EMap<S> Y(y.data() + n * Co * HW, Co, HW);
      Y.noalias() = Wm.transpose() * X;
      for (int64_t o = 0; o < Co; ++o) Y.row(o).array() += b.val()[o];
    }
  }
  int id = t.push(std::move(y), x.requires_grad() || w.requires_grad() || b.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [=, xi = x.id, wi = w.id, bi = b.id](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      detail::ECMap<S> Wm(t.nodes[wi].val.data(), Ci, Co);
      for (int64_t n = 0; n < N; ++n) {
        detail::ECMap<S> dY(dy.data() + n * Co * HW, Co, HW);
        if (t.nodes[xi].requires_grad) {
          detail::EMap<S> dX(t.grad_of(xi).data() + n * Ci * HW, Ci, HW);
          dX.noalias() += Wm * dY;
        }
        if (t.nodes[wi].requires_grad) {
          detail::ECMap<S> X(t.nodes[xi].val.data() + n * Ci * HW, Ci, HW);
          detail::EMap<S> dW(t.grad_of(wi).data(), Ci, Co);
          dW.noalias() += X * dY.transpose();
        }
        if (t.nodes[bi].requires_grad) {
          Tensor<S>& db = t.grad_of(bi);
          for (int64_t o = 0; o < Co; ++o) db[o] += dY.row(o).sum();
        }
      }
    };
  }
  return out;
}

// Nearest-neighbour 2x upsampling. x: [N,C,H,W] -> [N,C,2H,2W].
template <class S>
Var<S> upsample2x(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Shape& xs = x.shape();
  const int64_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  Tensor<S> y(Shape{N, C, 2 * H, 2 * W});
  const Tensor<S>& xv = x.val();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const S* src = xv.data() + nc * H * W;
    S* dst = y.data() + nc * 4 * H * W;
    for (int64_t i = 0; i < H; ++i)
      for (int64_t j = 0; j < W; ++j) {
        const S v = src[i * W + j];
        dst[(2 * i) * 2 * W + 2 * j] = v;
        dst[(2 * i) * 2 * W + 2 * j + 1] = v;
        dst[(2 * i + 1) * 2 * W + 2 * j] = v;
        dst[(2 * i + 1) * 2 * W + 2 * j + 1] = v;
      }
  }
  int id = t.push(std::move(y), x.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [xi = x.id, id, N, C, H, W](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      Tensor<S>& dx = t.grad_of(xi);
      for (int64_t nc = 0; nc < N * C; ++nc) {
        const S* g = dy.data() + nc * 4 * H * W;
        S* d = dx.data() + nc * H * W;
        for (int64_t i = 0; i < H; ++i)
          for (int64_t j = 0; j < W; ++j)
            d[i * W + j] += g[(2 * i) * 2 * W + 2 * j] + g[(2 * i) * 2 * W + 2 * j + 1] +
                            g[(2 * i + 1) * 2 * W + 2 * j] + g[(2 * i + 1) * 2 * W + 2 * j + 1];
      }
    };
  }
  return out;
}

// Instance normalization: statistics over H*W per (n, c). x: [N,C,H,W].
template <class S>
Var<S> instance_norm(Var<S> x, Var<S> gamma, Var<S> beta, S eps = S(1e-5)) {
  Tape<S>& t = *x.tape;
  const Shape& xs = x.shape();
  const int64_t N = xs[0], C = xs[1], HW = xs[2] * xs[3];
  Tensor<S> y(xs);
  Tensor<S> inv_std(Shape{N, C});
  Tensor<S> mean(Shape{N, C});
  const Tensor<S>& xv = x.val();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const S* src = xv.data() + (n * C + c) * HW;
      S m = S(0);
      for (int64_t i = 0; i < HW; ++i) m += src[i];
      m /= static_cast<S>(HW);
      S v = S(0);
      for (int64_t i = 0; i < HW; ++i) v += (src[i] - m) * (src[i] - m);
      v /= static_cast<S>(HW);
      const S is = S(1) / std::sqrt(v + eps);
      mean.at(n, c) = m;
      inv_std.at(n, c) = is;
      S* dst = y.data() + (n * C + c) * HW;
      const S g = gamma.val()[c], b = beta.val()[c];
      for (int64_t i = 0; i < HW; ++i) dst[i] = (src[i] - m) * is * g + b;
    }
  int id = t.push(std::move(y), x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [=, xi = x.id, gi = gamma.id, bi = beta.id, mean = std::move(mean),
                        inv_std = std::move(inv_std)](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      const Tensor<S>& xv = t.nodes[xi].val;
      const Tensor<S>& gv = t.nodes[gi].val;
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
          const S* src = xv.data() + (n * C + c) * HW;
          const S* g = dy.data() + (n * C + c) * HW;
          const S m = mean.at(n, c), is = inv_std.at(n, c);
          S sum_dy = S(0), sum_dy_xhat = S(0);
          for (int64_t i = 0; i < HW; ++i) {
            sum_dy += g[i];
            sum_dy_xhat += g[i] * (src[i] - m) * is;
          }
          if (t.nodes[gi].requires_grad) t.grad_of(gi)[c] += sum_dy_xhat;
          if (t.nodes[bi].requires_grad) t.grad_of(bi)[c] += sum_dy;
          if (t.nodes[xi].requires_grad) {
            S* dx = t.grad_of(xi).data() + (n * C + c) * HW;
            const S inv_n = S(1) / static_cast<S>(HW);
            const S gc = gv[c];
            for (int64_t i = 0; i < HW; ++i) {
              const S xhat = (src[i] - m) * is;
              dx[i] += gc * is * (g[i] - sum_dy * inv_n - xhat * sum_dy_xhat * inv_n);
            }
          }
        }
    };
  }
  return out;
}

// Batch normalization over rows of [R, C]. In training mode the (biased) batch
// statistics normalize and update the caller-owned running stats in place; in
// eval mode the running stats are used as constants.
template <class S>
Var<S> batch_norm(Var<S> x, Var<S> gamma, Var<S> beta, Tensor<S>& running_mean,
                  Tensor<S>& running_var, bool training, S momentum = S(0.1), S eps = S(1e-5)) {
  Tape<S>& t = *x.tape;
  const int64_t C = x.val().last_dim();
  const int64_t R = x.val().rows2d();
  if (running_mean.numel() != C || running_var.numel() != C)
    throw std::invalid_argument("batch_norm: running stats size");
  Tensor<S> y(x.shape());
  Tensor<S> mean(Shape{C}), inv_std(Shape{C});
  const Tensor<S>& xv = x.val();
  if (training) {
    for (int64_t c = 0; c < C; ++c) {
      S m = S(0);
      for (int64_t r = 0; r < R; ++r) m += xv[r * C + c];
      m /= static_cast<S>(R);
      S v = S(0);
      for (int64_t r = 0; r < R; ++r) v += (xv[r * C + c] - m) * (xv[r * C + c] - m);
      v /= static_cast<S>(R);
      mean[c] = m;
      inv_std[c] = S(1) / std::sqrt(v + eps);
      running_mean[c] = (S(1) - momentum) * running_mean[c] + momentum * m;
      running_var[c] = (S(1) - momentum) * running_var[c] + momentum * v;
    }
  } else {
    for (int64_t c = 0; c < C; ++c) {
      mean[c] = running_mean[c];
      inv_std[c] = S(1) / std::sqrt(running_var[c] + eps);
    }
  }
  for (int64_t r = 0; r < R; ++r)
    for (int64_t c = 0; c < C; ++c)
      y[r * C + c] = (xv[r * C + c] - mean[c]) * inv_std[c] * gamma.val()[c] + beta.val()[c];
  int id = t.push(std::move(y), x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [=, xi = x.id, gi = gamma.id, bi = beta.id, mean = std::move(mean),
                        inv_std = std::move(inv_std)](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      const Tensor<S>& xv = t.nodes[xi].val;
      const Tensor<S>& gv = t.nodes[gi].val;
      for (int64_t c = 0; c < C; ++c) {
        S sum_dy = S(0), sum_dy_xhat = S(0);
        for (int64_t r = 0; r < R; ++r) {
          const S xhat = (xv[r * C + c] - mean[c]) * inv_std[c];
          sum_dy += dy[r * C + c];
          sum_dy_xhat += dy[r * C + c] * xhat;
        }
        if (t.nodes[gi].requires_grad) t.grad_of(gi)[c] += sum_dy_xhat;
        if (t.nodes[bi].requires_grad) t.grad_of(bi)[c] += sum_dy;
        if (t.nodes[xi].requires_grad) {
          Tensor<S>& dx = t.grad_of(xi);
          const S gc = gv[c] * inv_std[c];
          if (training) {
            const S inv_r = S(1) / static_cast<S>(R);
            for (int64_t r = 0; r < R; ++r) {
              const S xhat = (xv[r * C + c] - mean[c]) * inv_std[c];
              dx[r * C + c] += gc * (dy[r * C + c] - sum_dy * inv_r - xhat * sum_dy_xhat * inv_r);
            }
          } else {
            for (int64_t r = 0; r < R; ++r) dx[r * C + c] += gc * dy[r * C + c];
          }
        }
      }
    };
  }
  return out;
}

// Bilinear read of a feature grid. grid: [C,Hg,Wg]; pts: [M,2] as (gx, gy) in
// grid coordinates; valid: [M]. Invalid points yield zero features. Points are
// geometry, so no gradient flows to them.
template <class S>
Var<S> bilinear_gather(Var<S> grid, const Tensor<S>& pts, const Tensor<uint8_t>& valid) {
  Tape<S>& t = *grid.tape;
  const Shape& gs = grid.shape();
  const int64_t C = gs[0], Hg = gs[1], Wg = gs[2];
  const int64_t M = valid.numel();
  struct Tap {
    int64_t i00 = 0;
    S w00 = 0, w01 = 0, w10 = 0, w11 = 0;
    bool on = false;
  };
  std::vector<Tap> taps(static_cast<size_t>(M));
  for (int64_t m = 0; m < M; ++m) {
    if (!valid[m]) continue;
    S gx = std::clamp(pts[m * 2 + 0], S(0), static_cast<S>(Wg - 1));
    S gy = std::clamp(pts[m * 2 + 1], S(0), static_cast<S>(Hg - 1));
    const int64_t x0 = std::min(static_cast<int64_t>(gx), std::max<int64_t>(Wg - 2, 0));
    const int64_t y0 = std::min(static_cast<int64_t>(gy), std::max<int64_t>(Hg - 2, 0));
    const S fx = gx - static_cast<S>(x0);
    const S fy = gy - static_cast<S>(y0);
    Tap& tp = taps[static_cast<size_t>(m)];
    tp.i00 = y0 * Wg + x0;
    tp.w00 = (S(1) - fx) * (S(1) - fy);
    tp.w01 = fx * (S(1) - fy);
    tp.w10 = (S(1) - fx) * fy;
    tp.w11 = fx * fy;
    tp.on = true;
  }
  Tensor<S> y(Shape{M, C});
  const Tensor<S>& gv = grid.val();
  for (int64_t m = 0; m < M; ++m) {
    const Tap& tp = taps[static_cast<size_t>(m)];
    if (!tp.on) continue;
    for (int64_t c = 0; c < C; ++c) {
      const S* plane = gv.data() + c * Hg * Wg;
      y[m * C + c] = tp.w00 * plane[tp.i00] + tp.w01 * plane[tp.i00 + 1] +
                     tp.w10 * plane[tp.i00 + Wg] + tp.w11 * plane[tp.i00 + Wg + 1];
    }
  }
  int id = t.push(std::move(y), grid.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [id, gi = grid.id, M, C, Hg, Wg, taps = std::move(taps)](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      Tensor<S>& dg = t.grad_of(gi);
      for (int64_t m = 0; m < M; ++m) {
        const Tap& tp = taps[static_cast<size_t>(m)];
        if (!tp.on) continue;
        for (int64_t c = 0; c < C; ++c) {
          S* plane = dg.data() + c * Hg * Wg;
          const S g = dy[m * C + c];
          plane[tp.i00] += tp.w00 * g;
          plane[tp.i00 + 1] += tp.w01 * g;
          plane[tp.i00 + Wg] += tp.w10 * g;
          plane[tp.i00 + Wg + 1] += tp.w11 * g;
        }
      }
    };
  }
  return out;
}

// Top-left spatial crop: x: [N,C,H,W] -> [N,C,Hc,Wc].
template <class S>
Var<S> crop2d(Var<S> x, int64_t Hc, int64_t Wc) {
  Tape<S>& t = *x.tape;
  const Shape& xs = x.shape();
  const int64_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  if (Hc > H || Wc > W) throw std::invalid_argument("crop2d: crop larger than input");
  if (Hc == H && Wc == W) return x;
  Tensor<S> y(Shape{N, C, Hc, Wc});
  const Tensor<S>& xv = x.val();
  for (int64_t nc = 0; nc < N * C; ++nc)
    for (int64_t i = 0; i < Hc; ++i)
      std::copy(xv.data() + (nc * H + i) * W, xv.data() + (nc * H + i) * W + Wc,
                y.data() + (nc * Hc + i) * Wc);
  int id = t.push(std::move(y), x.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [xi = x.id, id, N, C, H, W, Hc, Wc](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      Tensor<S>& dx = t.grad_of(xi);
      for (int64_t nc = 0; nc < N * C; ++nc)
        for (int64_t i = 0; i < Hc; ++i)
          for (int64_t j = 0; j < Wc; ++j)
            dx[(nc * H + i) * W + j] += dy[(nc * Hc + i) * Wc + j];
    };
  }
  return out;
}

// Bilinear read across a stack of per-view grids. grids: [N,C,Hg,Wg];
// pts: [N,M,2] grid coordinates; valid: [N,M]. Output is [M,N,C] so that
// reshaping to [B,K,N,C] is free downstream.
template <class S>
Var<S> bilinear_gather_views(Var<S> grids, const Tensor<S>& pts, const Tensor<uint8_t>& valid) {
  Tape<S>& t = *grids.tape;
  const Shape& gs = grids.shape();
  const int64_t N = gs[0], C = gs[1], Hg = gs[2], Wg = gs[3];
  if (pts.shape[0] != N || valid.shape[0] != N)
    throw std::invalid_argument("bilinear_gather_views: view count mismatch");
  const int64_t M = valid.shape[1];
  struct Tap {
    int64_t i00 = 0;
    S w00 = 0, w01 = 0, w10 = 0, w11 = 0;
    bool on = false;
  };
  std::vector<Tap> taps(static_cast<size_t>(N * M));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t m = 0; m < M; ++m) {
      if (!valid[n * M + m]) continue;
      S gx = std::clamp(pts[(n * M + m) * 2 + 0], S(0), static_cast<S>(Wg - 1));
      S gy = std::clamp(pts[(n * M + m) * 2 + 1], S(0), static_cast<S>(Hg - 1));
      const int64_t x0 = std::min(static_cast<int64_t>(gx), std::max<int64_t>(Wg - 2, 0));
      const int64_t y0 = std::min(static_cast<int64_t>(gy), std::max<int64_t>(Hg - 2, 0));
      const S fx = gx - static_cast<S>(x0);
      const S fy = gy - static_cast<S>(y0);
      Tap& tp = taps[static_cast<size_t>(n * M + m)];
      tp.i00 = y0 * Wg + x0;
      tp.w00 = (S(1) - fx) * (S(1) - fy);
      tp.w01 = fx * (S(1) - fy);
      tp.w10 = (S(1) - fx) * fy;
      tp.w11 = fx * fy;
      tp.on = true;
    }
  Tensor<S> y(Shape{M, N, C});
  const Tensor<S>& gv = grids.val();
  for (int64_t n = 0; n < N; ++n) {
    const S* base = gv.data() + n * C * Hg * Wg;
    for (int64_t m = 0; m < M; ++m) {
      const Tap& tp = taps[static_cast<size_t>(n * M + m)];
      if (!tp.on) continue;
      S* dst = y.data() + (m * N + n) * C;
      for (int64_t c = 0; c < C; ++c) {
        const S* plane = base + c * Hg * Wg;
        dst[c] = tp.w00 * plane[tp.i00] + tp.w01 * plane[tp.i00 + 1] +
                 tp.w10 * plane[tp.i00 + Wg] + tp.w11 * plane[tp.i00 + Wg + 1];
      }
    }
  }
  int id = t.push(std::move(y), grids.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [id, gi = grids.id, N, M, C, Hg, Wg, taps = std::move(taps)](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      Tensor<S>& dg = t.grad_of(gi);
      for (int64_t n = 0; n < N; ++n) {
        S* base = dg.data() + n * C * Hg * Wg;
        for (int64_t m = 0; m < M; ++m) {
          const Tap& tp = taps[static_cast<size_t>(n * M + m)];
          if (!tp.on) continue;
          const S* g = dy.data() + (m * N + n) * C;
          for (int64_t c = 0; c < C; ++c) {
            S* plane = base + c * Hg * Wg;
            plane[tp.i00] += tp.w00 * g[c];
            plane[tp.i00 + 1] += tp.w01 * g[c];
            plane[tp.i00 + Wg] += tp.w10 * g[c];
            plane[tp.i00 + Wg + 1] += tp.w11 * g[c];
          }
        }
      }
    };
  }
  return out;
}

// Per-row vector-matrix product: x: [R,K], w: [R,K,C] -> [R,C].
template <class S>
Var<S> bmm_rvec(Var<S> x, Var<S> w) {
  Tape<S>& t = *x.tape;
  const int64_t K = x.val().last_dim();
  const int64_t R = x.val().rows2d();
  const Shape& ws = w.shape();
  const int64_t C = ws[ws.nd - 1];
  if (w.val().numel() != R * K * C) throw std::invalid_argument("bmm_rvec: shape mismatch");
  Tensor<S> y(detail::with_last(x.shape(), C));
  const Tensor<S>&xv = x.val(), &wv = w.val();
  for (int64_t r = 0; r < R; ++r) {
    const S* xr = xv.data() + r * K;
    const S* wr = wv.data() + r * K * C;
    S* yr = y.data() + r * C;
    for (int64_t c = 0; c < C; ++c) yr[c] = S(0);
    for (int64_t k = 0; k < K; ++k) {
      const S xk = xr[k];
      const S* wk = wr + k * C;
      for (int64_t c = 0; c < C; ++c) yr[c] += xk * wk[c];
    }
  }
  int id = t.push(std::move(y), x.requires_grad() || w.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [=, xi = x.id, wi = w.id](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      const Tensor<S>&xv = t.nodes[xi].val, &wv = t.nodes[wi].val;
      const bool nx = t.nodes[xi].requires_grad, nw = t.nodes[wi].requires_grad;
      Tensor<S>* dx = nx ? &t.grad_of(xi) : nullptr;
      Tensor<S>* dw = nw ? &t.grad_of(wi) : nullptr;
      for (int64_t r = 0; r < R; ++r) {
        const S* dyr = dy.data() + r * C;
        const S* xr = xv.data() + r * K;
        const S* wr = wv.data() + r * K * C;
        for (int64_t k = 0; k < K; ++k) {
          const S* wk = wr + k * C;
          if (nx) {
            S acc = S(0);
            for (int64_t c = 0; c < C; ++c) acc += wk[c] * dyr[c];
            dx->data()[r * K + k] += acc;
          }
          if (nw) {
            S* dwk = dw->data() + (r * K + k) * C;
            const S xk = xr[k];
            for (int64_t c = 0; c < C; ++c) dwk[c] += xk * dyr[c];
          }
        }
      }
    };
  }
  return out;
}

// Linear map along the sample axis: x: [B,K,D], wk: [K,K], bk: [K];
// y[b,i,f] = sum_j wk[i,j] x[b,j,f] + bk[i].
template <class S>
Var<S> linear_over_k(Var<S> x, Var<S> wk, Var<S> bk) {
  Tape<S>& t = *x.tape;
  const Shape& xs = x.shape();
  if (xs.nd != 3) throw std::invalid_argument("linear_over_k: expects [B,K,D]");
  const int64_t B = xs[0], K = xs[1], D = xs[2];
  if (wk.shape()[0] != K || wk.shape()[1] != K)
    throw std::invalid_argument("linear_over_k: sample-count mismatch (configured K=" +
                                std::to_string(wk.shape()[0]) + ", got K=" + std::to_string(K) +
                                ")");
  Tensor<S> y(xs);
  {
    detail::ECMap<S> Wk(wk.val().data(), K, K);
    for (int64_t b = 0; b < B; ++b) {
      detail::ECMap<S> X(x.val().data() + b * K * D, K, D);
      detail::EMap<S> Y(y.data() + b * K * D, K, D);
      Y.noalias() = Wk * X;
      for (int64_t i = 0; i < K; ++i) Y.row(i).array() += bk.val()[i];
    }
  }
  int id = t.push(std::move(y), x.requires_grad() || wk.requires_grad() || bk.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [=, xi = x.id, wi = wk.id, bi = bk.id](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      detail::ECMap<S> Wk(t.nodes[wi].val.data(), K, K);
      for (int64_t b = 0; b < B; ++b) {
        detail::ECMap<S> dY(dy.data() + b * K * D, K, D);
        if (t.nodes[xi].requires_grad) {
          detail::EMap<S> dX(t.grad_of(xi).data() + b * K * D, K, D);
          dX.noalias() += Wk.transpose() * dY;
        }
        if (t.nodes[wi].requires_grad) {
          detail::ECMap<S> X(t.nodes[xi].val.data() + b * K * D, K, D);
          detail::EMap<S> dW(t.grad_of(wi).data(), K, K);
          dW.noalias() += dY * X.transpose();
        }
        if (t.nodes[bi].requires_grad) {
          Tensor<S>& db = t.grad_of(bi);
          for (int64_t i = 0; i < K; ++i) db[i] += dY.row(i).sum();
        }
      }
    };
  }
  return out;
}

// Weighted sum over the middle (view) axis: f: [G,N,D], w: [G,N] -> [G,D].
template <class S>
Var<S> weighted_sum_views(Var<S> f, Var<S> w) {
  Tape<S>& t = *f.tape;
  const Shape& fs = f.shape();
  const int64_t D = fs[fs.nd - 1];
  const int64_t N = fs[fs.nd - 2];
  const int64_t G = f.val().numel() / (N * D);
  if (w.val().numel() != G * N) throw std::invalid_argument("weighted_sum_views: weight size");
  Shape ys = fs;
  ys.d[ys.nd - 2] = D;
  ys.nd -= 1;
  ys.d[ys.nd - 1] = D;
  Tensor<S> y(ys);
  const Tensor<S>&fv = f.val(), &wv = w.val();
  for (int64_t g = 0; g < G; ++g) {
    S* yr = y.data() + g * D;
    for (int64_t d = 0; d < D; ++d) yr[d] = S(0);
    for (int64_t n = 0; n < N; ++n) {
      const S wn = wv[g * N + n];
      const S* fr = fv.data() + (g * N + n) * D;
      for (int64_t d = 0; d < D; ++d) yr[d] += wn * fr[d];
    }
  }
  int id = t.push(std::move(y), f.requires_grad() || w.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [=, fi = f.id, wi = w.id](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      const Tensor<S>&fv = t.nodes[fi].val, &wv = t.nodes[wi].val;
      const bool nf = t.nodes[fi].requires_grad, nw = t.nodes[wi].requires_grad;
      Tensor<S>* df = nf ? &t.grad_of(fi) : nullptr;
      Tensor<S>* dw = nw ? &t.grad_of(wi) : nullptr;
      for (int64_t g = 0; g < G; ++g) {
        const S* dyr = dy.data() + g * D;
        for (int64_t n = 0; n < N; ++n) {
          const S* fr = fv.data() + (g * N + n) * D;
          if (nf) {
            S* dfr = df->data() + (g * N + n) * D;
            const S wn = wv[g * N + n];
            for (int64_t d = 0; d < D; ++d) dfr[d] += wn * dyr[d];
          }
          if (nw) {
            S acc = S(0);
            for (int64_t d = 0; d < D; ++d) acc += fr[d] * dyr[d];
            dw->data()[g * N + n] += acc;
          }
        }
      }
    };
  }
  return out;
}

// Elementwise max over the middle (view) axis restricted to valid views.
// f: [G,N,D], valid: [G,N] -> [G,D]; rows with no valid view yield zeros.
template <class S>
Var<S> max_views(Var<S> f, const Tensor<uint8_t>& valid) {
  Tape<S>& t = *f.tape;
  const Shape& fs = f.shape();
  const int64_t D = fs[fs.nd - 1];
  const int64_t N = fs[fs.nd - 2];
  const int64_t G = f.val().numel() / (N * D);
  if (valid.numel() != G * N) throw std::invalid_argument("max_views: mask size");
  Shape ys = fs;
  ys.nd -= 1;
  ys.d[ys.nd - 1] = D;
  Tensor<S> y(ys);
  std::vector<int32_t> arg(static_cast<size_t>(G * D), -1);
  const Tensor<S>& fv = f.val();
  for (int64_t g = 0; g < G; ++g) {
    S* yr = y.data() + g * D;
    int32_t* ar = arg.data() + g * D;
    for (int64_t n = 0; n < N; ++n) {
      if (!valid[g * N + n]) continue;
      const S* fr = fv.data() + (g * N + n) * D;
      for (int64_t d = 0; d < D; ++d) {
        if (ar[d] < 0 || fr[d] > yr[d]) {
          yr[d] = fr[d];
          ar[d] = static_cast<int32_t>(n);
        }
      }
    }
    for (int64_t d = 0; d < D; ++d)
      if (ar[d] < 0) yr[d] = S(0);
  }
  int id = t.push(std::move(y), f.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [=, fi = f.id, arg = std::move(arg)](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      Tensor<S>& df = t.grad_of(fi);
      for (int64_t g = 0; g < G; ++g)
        for (int64_t d = 0; d < D; ++d) {
          const int32_t n = arg[g * D + d];
          if (n >= 0) df[(g * N + n) * D + d] += dy[g * D + d];
        }
    };
  }
  return out;
}

// Repeat each row along a new middle axis: x: [G,D] -> [G,N,D].
template <class S>
Var<S> tile_middle(Var<S> x, int64_t N) {
  Tape<S>& t = *x.tape;
  const int64_t D = x.val().last_dim();
  const int64_t G = x.val().rows2d();
  Shape ys = x.shape();
  ys.d[ys.nd - 1] = N;
  if (ys.nd >= 4) throw std::invalid_argument("tile_middle: rank overflow");
  ys.d[ys.nd] = D;
  ys.nd += 1;
  Tensor<S> y(ys);
  const Tensor<S>& xv = x.val();
  for (int64_t g = 0; g < G; ++g)
    for (int64_t n = 0; n < N; ++n)
      std::copy(xv.data() + g * D, xv.data() + (g + 1) * D, y.data() + (g * N + n) * D);
  int id = t.push(std::move(y), x.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [xi = x.id, id, G, N, D](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      Tensor<S>& dx = t.grad_of(xi);
      for (int64_t g = 0; g < G; ++g)
        for (int64_t n = 0; n < N; ++n)
          for (int64_t d = 0; d < D; ++d) dx[g * D + d] += dy[(g * N + n) * D + d];
    };
  }
  return out;
}

// Hitting weights from per-sample opacities: w_i = a_i * prod_{j<i} (1 - a_j).
// alpha: [B,K] in [0,1].
template <class S>
Var<S> cumulative_hitting(Var<S> alpha) {
  Tape<S>& t = *alpha.tape;
  const int64_t K = alpha.val().last_dim();
  const int64_t B = alpha.val().rows2d();
  Tensor<S> w(alpha.shape());
  Tensor<S> trans(alpha.shape());  // T_i = prod_{j<i} (1 - a_j)
  const Tensor<S>& av = alpha.val();
  for (int64_t b = 0; b < B; ++b) {
    S T = S(1);
    for (int64_t k = 0; k < K; ++k) {
      trans[b * K + k] = T;
      w[b * K + k] = av[b * K + k] * T;
      T *= (S(1) - av[b * K + k]);
    }
  }
  int id = t.push(std::move(w), alpha.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [=, ai = alpha.id, trans = std::move(trans)](Tape<S>& t) {
      const Tensor<S>& dw = t.nodes[id].grad;
      const Tensor<S>& wv = t.nodes[id].val;
      const Tensor<S>& av = t.nodes[ai].val;
      Tensor<S>& da = t.grad_of(ai);
      for (int64_t b = 0; b < B; ++b) {
        // d w_m / d a_k = -w_m / (1 - a_k) for m > k; suffix sums give O(K).
        S suffix = S(0);
        for (int64_t k = K - 1; k >= 0; --k) {
          const int64_t i = b * K + k;
          const S one_minus = std::max(S(1) - av[i], S(1e-12));
          da[i] += dw[i] * trans[i] - suffix / one_minus;
          suffix += dw[i] * wv[i];
        }
      }
    };
  }
  return out;
}

}  // namespace gnfield
