#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "gnfield/tensor.hpp"

namespace gnfield {

// Reverse-mode tape. Nodes own their values; the graph is rebuilt every step.
template <class S>
class Tape {
 public:
  struct Node {
    Tensor<S> val;
    Tensor<S> grad;
    std::function<void(Tape&)> back;
    bool requires_grad = false;
    const char* tag = nullptr;
  };

  std::vector<Node> nodes;
  bool grad_enabled = true;

  int push(Tensor<S>&& v, bool requires_grad) {
    nodes.push_back(Node{std::move(v), Tensor<S>{}, nullptr, requires_grad && grad_enabled, nullptr});
    return static_cast<int>(nodes.size()) - 1;
  }

  Tensor<S>& grad_of(int id) {
    Node& n = nodes[static_cast<size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor<S>::zeros(n.val.shape);
    return n.grad;
  }

  void backward(int loss_id) {
    Node& loss = nodes[static_cast<size_t>(loss_id)];
    if (loss.val.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    grad_of(loss_id)[0] = S(1);
    for (int i = loss_id; i >= 0; --i) {
      Node& n = nodes[static_cast<size_t>(i)];
      if (n.back && !n.grad.empty()) n.back(*this);
    }
  }

  const char* first_nonfinite_tag() const {
    for (const Node& n : nodes)
      if (!n.val.all_finite()) return n.tag ? n.tag : "(untagged node)";
    return nullptr;
  }
};

template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Tensor<S>& val() const { return tape->nodes[static_cast<size_t>(id)].val; }
  const Shape& shape() const { return val().shape; }
  bool requires_grad() const { return tape->nodes[static_cast<size_t>(id)].requires_grad; }
  Var tagged(const char* tag) const {
    tape->nodes[static_cast<size_t>(id)].tag = tag;
    return *this;
  }
};

template <class S>
Var<S> make_leaf(Tape<S>& t, Tensor<S> v, bool requires_grad) {
  int id = t.push(std::move(v), requires_grad);
  return Var<S>{&t, id};
}

template <class S>
Var<S> make_const(Tape<S>& t, Tensor<S> v) {
  return make_leaf(t, std::move(v), false);
}

namespace detail {

template <class S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using EMap = Eigen::Map<EMat<S>>;
template <class S>
using ECMap = Eigen::Map<const EMat<S>>;

template <class S>
void accum(Tensor<S>& dst, const Tensor<S>& src) {
  S* d = dst.data();
  const S* s = src.data();
  const int64_t n = dst.numel();
  for (int64_t i = 0; i < n; ++i) d[i] += s[i];
}

inline Shape with_last(const Shape& s, int64_t c) {
  Shape r = s;
  if (r.nd == 0) r.nd = 1;
  r.d[r.nd - 1] = c;
  return r;
}

inline Shape drop_last(const Shape& s) {
  Shape r = s;
  if (r.nd > 1) {
    r.nd -= 1;
  } else {
    r = Shape{1};
    r.d[0] = s.numel() / s.d[0];  // degenerate; callers use nd>=2
  }
  return r;
}

template <class S>
void check_same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                                b.shape().str());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcasting primitives
// ---------------------------------------------------------------------------

template <class S, class Fwd, class Bwd>
Var<S> unary_op(Var<S> x, Fwd fwd, Bwd grad_from_xy) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.val();
  Tensor<S> y(xv.shape);
  for (int64_t i = 0; i < xv.numel(); ++i) y[i] = fwd(xv[i]);
  int id = t.push(std::move(y), x.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [xi = x.id, id, grad_from_xy](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      const Tensor<S>& xv = t.nodes[xi].val;
      const Tensor<S>& yv = t.nodes[id].val;
      Tensor<S>& dx = t.grad_of(xi);
      for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i] * grad_from_xy(xv[i], yv[i]);
    };
  }
  return out;
}

template <class S>
Var<S> relu(Var<S> x) {
  return unary_op(
      x, [](S v) { return v > S(0) ? v : S(0); },
      [](S xv, S) { return xv > S(0) ? S(1) : S(0); });
}

template <class S>
Var<S> clamp_min0(Var<S> x) {
  return relu(x);
}

template <class S>
Var<S> sigmoid(Var<S> x) {
  return unary_op(
      x,
      [](S v) {
        if (v >= S(0)) return S(1) / (S(1) + std::exp(-v));
        S e = std::exp(v);
        return e / (S(1) + e);
      },
      [](S, S yv) { return yv * (S(1) - yv); });
}

template <class S>
Var<S> sin_op(Var<S> x) {
  return unary_op(
      x, [](S v) { return std::sin(v); }, [](S xv, S) { return std::cos(xv); });
}

template <class S>
Var<S> square(Var<S> x) {
  return unary_op(
      x, [](S v) { return v * v; }, [](S xv, S) { return S(2) * xv; });
}

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::check_same_shape(a, b, "add");
  Tape<S>& t = *a.tape;
  Tensor<S> y(a.shape());
  const Tensor<S>&av = a.val(), &bv = b.val();
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = av[i] + bv[i];
  int id = t.push(std::move(y), a.requires_grad() || b.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [ai = a.id, bi = b.id, id](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      if (t.nodes[ai].requires_grad) detail::accum(t.grad_of(ai), dy);
      if (t.nodes[bi].requires_grad) detail::accum(t.grad_of(bi), dy);
    };
  }
  return out;
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::check_same_shape(a, b, "sub");
  Tape<S>& t = *a.tape;
  Tensor<S> y(a.shape());
  const Tensor<S>&av = a.val(), &bv = b.val();
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = av[i] - bv[i];
  int id = t.push(std::move(y), a.requires_grad() || b.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [ai = a.id, bi = b.id, id](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      if (t.nodes[ai].requires_grad) detail::accum(t.grad_of(ai), dy);
      if (t.nodes[bi].requires_grad) {
        Tensor<S>& db = t.grad_of(bi);
        for (int64_t i = 0; i < dy.numel(); ++i) db[i] -= dy[i];
      }
    };
  }
  return out;
}

template <class S>
Var<S> mul(Var<S> a, Var<S> b) {
  detail::check_same_shape(a, b, "mul");
  Tape<S>& t = *a.tape;
  Tensor<S> y(a.shape());
  const Tensor<S>&av = a.val(), &bv = b.val();
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = av[i] * bv[i];
  int id = t.push(std::move(y), a.requires_grad() || b.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [ai = a.id, bi = b.id, id](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      const Tensor<S>&av = t.nodes[ai].val, &bv = t.nodes[bi].val;
      if (t.nodes[ai].requires_grad) {
        Tensor<S>& da = t.grad_of(ai);
        for (int64_t i = 0; i < dy.numel(); ++i) da[i] += dy[i] * bv[i];
      }
      if (t.nodes[bi].requires_grad) {
        Tensor<S>& db = t.grad_of(bi);
        for (int64_t i = 0; i < dy.numel(); ++i) db[i] += dy[i] * av[i];
      }
    };
  }
  return out;
}

template <class S>
Var<S> mul_scalar(Var<S> x, S c) {
  return unary_op(
      x, [c](S v) { return v * c; }, [c](S, S) { return c; });
}

template <class S>
Var<S> add_scalar(Var<S> x, S c) {
  return unary_op(
      x, [c](S v) { return v + c; }, [](S, S) { return S(1); });
}

// x: [.., C] plus a length-C vector applied to every row.
template <class S>
Var<S> add_rowvec(Var<S> x, Var<S> b) {
  Tape<S>& t = *x.tape;
  const int64_t C = x.val().last_dim();
  const int64_t R = x.val().rows2d();
  if (b.val().numel() != C) throw std::invalid_argument("add_rowvec: width mismatch");
  Tensor<S> y(x.shape());
  const Tensor<S>&xv = x.val(), &bv = b.val();
  for (int64_t r = 0; r < R; ++r)
    for (int64_t c = 0; c < C; ++c) y[r * C + c] = xv[r * C + c] + bv[c];
  int id = t.push(std::move(y), x.requires_grad() || b.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [xi = x.id, bi = b.id, id, R, C](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      if (t.nodes[xi].requires_grad) detail::accum(t.grad_of(xi), dy);
      if (t.nodes[bi].requires_grad) {
        Tensor<S>& db = t.grad_of(bi);
        for (int64_t r = 0; r < R; ++r)
          for (int64_t c = 0; c < C; ++c) db[c] += dy[r * C + c];
      }
    };
  }
  return out;
}

// y = x @ w, x: [.., K] seen as [R, K], w: [K, C]; output [.., C].
template <class S>
Var<S> matmul(Var<S> x, Var<S> w) {
  Tape<S>& t = *x.tape;
  const int64_t K = x.val().last_dim();
  const int64_t R = x.val().rows2d();
  if (w.shape().nd != 2 || w.shape()[0] != K)
    throw std::invalid_argument("matmul: inner dim mismatch " + x.shape().str() + " @ " +
                                w.shape().str());
  const int64_t C = w.shape()[1];
  Tensor<S> y(detail::with_last(x.shape(), C));
  {
    detail::ECMap<S> X(x.val().data(), R, K), W(w.val().data(), K, C);
    detail::EMap<S> Y(y.data(), R, C);
    Y.noalias() = X * W;
  }
  int id = t.push(std::move(y), x.requires_grad() || w.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [xi = x.id, wi = w.id, id, R, K, C](Tape<S>& t) {
      detail::ECMap<S> dY(t.nodes[id].grad.data(), R, C);
      if (t.nodes[xi].requires_grad) {
        detail::ECMap<S> W(t.nodes[wi].val.data(), K, C);
        detail::EMap<S> dX(t.grad_of(xi).data(), R, K);
        dX.noalias() += dY * W.transpose();
      }
      if (t.nodes[wi].requires_grad) {
        detail::ECMap<S> X(t.nodes[xi].val.data(), R, K);
        detail::EMap<S> dW(t.grad_of(wi).data(), K, C);
        dW.noalias() += X.transpose() * dY;
      }
    };
  }
  return out;
}

template <class S>
Var<S> concat_last(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const int64_t R = a.val().rows2d();
  if (b.val().rows2d() != R) throw std::invalid_argument("concat_last: row mismatch");
  const int64_t Ca = a.val().last_dim(), Cb = b.val().last_dim();
  Tensor<S> y(detail::with_last(a.shape(), Ca + Cb));
  const Tensor<S>&av = a.val(), &bv = b.val();
  for (int64_t r = 0; r < R; ++r) {
    S* dst = y.data() + r * (Ca + Cb);
    std::copy(av.data() + r * Ca, av.data() + (r + 1) * Ca, dst);
    std::copy(bv.data() + r * Cb, bv.data() + (r + 1) * Cb, dst + Ca);
  }
  int id = t.push(std::move(y), a.requires_grad() || b.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [ai = a.id, bi = b.id, id, R, Ca, Cb](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      if (t.nodes[ai].requires_grad) {
        Tensor<S>& da = t.grad_of(ai);
        for (int64_t r = 0; r < R; ++r)
          for (int64_t c = 0; c < Ca; ++c) da[r * Ca + c] += dy[r * (Ca + Cb) + c];
      }
      if (t.nodes[bi].requires_grad) {
        Tensor<S>& db = t.grad_of(bi);
        for (int64_t r = 0; r < R; ++r)
          for (int64_t c = 0; c < Cb; ++c) db[r * Cb + c] += dy[r * (Ca + Cb) + Ca + c];
      }
    };
  }
  return out;
}

template <class S>
Var<S> concat_last(Var<S> a, Var<S> b, Var<S> c) {
  return concat_last(concat_last(a, b), c);
}

template <class S>
Var<S> slice_last(Var<S> x, int64_t c0, int64_t c1) {
  Tape<S>& t = *x.tape;
  const int64_t C = x.val().last_dim();
  const int64_t R = x.val().rows2d();
  if (c0 < 0 || c1 > C || c0 >= c1) throw std::invalid_argument("slice_last: bad range");
  const int64_t Cs = c1 - c0;
  Tensor<S> y(detail::with_last(x.shape(), Cs));
  const Tensor<S>& xv = x.val();
  for (int64_t r = 0; r < R; ++r)
    std::copy(xv.data() + r * C + c0, xv.data() + r * C + c1, y.data() + r * Cs);
  int id = t.push(std::move(y), x.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [xi = x.id, id, R, C, c0, Cs](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      Tensor<S>& dx = t.grad_of(xi);
      for (int64_t r = 0; r < R; ++r)
        for (int64_t c = 0; c < Cs; ++c) dx[r * C + c0 + c] += dy[r * Cs + c];
    };
  }
  return out;
}

template <class S>
Var<S> reshape(Var<S> x, Shape s) {
  Tape<S>& t = *x.tape;
  Tensor<S> y = x.val().reshaped(s);
  int id = t.push(std::move(y), x.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [xi = x.id, id](Tape<S>& t) {
      if (t.nodes[xi].requires_grad) detail::accum(t.grad_of(xi), t.nodes[id].grad);
    };
  }
  return out;
}

template <class S>
Var<S> stopgrad(Var<S> x) {
  Tape<S>& t = *x.tape;
  Tensor<S> y = x.val();
  int id = t.push(std::move(y), false);
  return Var<S>{&t, id};
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class S>
Var<S> sum_all(Var<S> x) {
  Tape<S>& t = *x.tape;
  S acc = S(0);
  const Tensor<S>& xv = x.val();
  for (int64_t i = 0; i < xv.numel(); ++i) acc += xv[i];
  int id = t.push(Tensor<S>::scalar(acc), x.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [xi = x.id, id](Tape<S>& t) {
      const S g = t.nodes[id].grad[0];
      Tensor<S>& dx = t.grad_of(xi);
      for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += g;
    };
  }
  return out;
}

template <class S>
Var<S> mean_all(Var<S> x) {
  const S n = static_cast<S>(x.val().numel());
  return mul_scalar(sum_all(x), S(1) / n);
}

// [.., C] -> [..] summing the last dimension.
template <class S>
Var<S> sum_last(Var<S> x) {
  Tape<S>& t = *x.tape;
  const int64_t C = x.val().last_dim();
  const int64_t R = x.val().rows2d();
  Tensor<S> y(detail::drop_last(x.shape()));
  const Tensor<S>& xv = x.val();
  for (int64_t r = 0; r < R; ++r) {
    S acc = S(0);
    for (int64_t c = 0; c < C; ++c) acc += xv[r * C + c];
    y[r] = acc;
  }
  int id = t.push(std::move(y), x.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [xi = x.id, id, R, C](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      Tensor<S>& dx = t.grad_of(xi);
      for (int64_t r = 0; r < R; ++r)
        for (int64_t c = 0; c < C; ++c) dx[r * C + c] += dy[r];
    };
  }
  return out;
}

// r: [R], b: [C] -> y[r,c] = r[r] * b[c]; b is a constant direction.
template <class S>
Var<S> outer_rows(Var<S> r, const Tensor<S>& b) {
  Tape<S>& t = *r.tape;
  const int64_t R = r.val().numel();
  const int64_t C = b.numel();
  Shape ys = r.shape();
  if (ys.nd < 4) {
    ys.d[ys.nd] = C;
    ys.nd += 1;
  } else {
    throw std::invalid_argument("outer_rows: rank overflow");
  }
  Tensor<S> y(ys);
  const Tensor<S>& rv = r.val();
  for (int64_t i = 0; i < R; ++i)
    for (int64_t c = 0; c < C; ++c) y[i * C + c] = rv[i] * b[c];
  int id = t.push(std::move(y), r.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [ri = r.id, id, R, C, b](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      Tensor<S>& dr = t.grad_of(ri);
      for (int64_t i = 0; i < R; ++i) {
        S acc = S(0);
        for (int64_t c = 0; c < C; ++c) acc += dy[i * C + c] * b[c];
        dr[i] += acc;
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Masking and softmax
// ---------------------------------------------------------------------------

// mask entries == 0 are replaced by `value`; gradient flows only where mask != 0.
template <class S>
Var<S> masked_fill(Var<S> x, const Tensor<uint8_t>& keep, S value) {
  Tape<S>& t = *x.tape;
  if (keep.numel() != x.val().numel()) throw std::invalid_argument("masked_fill: size mismatch");
  Tensor<S> y(x.shape());
  const Tensor<S>& xv = x.val();
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = keep[i] ? xv[i] : value;
  int id = t.push(std::move(y), x.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [xi = x.id, id, keep](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      Tensor<S>& dx = t.grad_of(xi);
      for (int64_t i = 0; i < dy.numel(); ++i)
        if (keep[i]) dx[i] += dy[i];
    };
  }
  return out;
}

// Softmax over the last dimension with a validity mask. Invalid entries get
// exactly zero; rows with no valid entry fall back to the uniform 1/C.
template <class S>
Var<S> softmax_masked(Var<S> x, const Tensor<uint8_t>& valid) {
  Tape<S>& t = *x.tape;
  const int64_t C = x.val().last_dim();
  const int64_t R = x.val().rows2d();
  if (valid.numel() != x.val().numel()) throw std::invalid_argument("softmax_masked: mask size");
  Tensor<S> y(x.shape());
  const Tensor<S>& xv = x.val();
  for (int64_t r = 0; r < R; ++r) {
    S mx = -std::numeric_limits<S>::infinity();
    bool any = false;
    for (int64_t c = 0; c < C; ++c)
      if (valid[r * C + c]) {
        any = true;
        mx = std::max(mx, xv[r * C + c]);
      }
    if (!any) {
      for (int64_t c = 0; c < C; ++c) y[r * C + c] = S(1) / static_cast<S>(C);
      continue;
    }
    S denom = S(0);
    for (int64_t c = 0; c < C; ++c) {
      if (valid[r * C + c]) {
        y[r * C + c] = std::exp(xv[r * C + c] - mx);
        denom += y[r * C + c];
      } else {
        y[r * C + c] = S(0);
      }
    }
    for (int64_t c = 0; c < C; ++c) y[r * C + c] /= denom;
  }
  int id = t.push(std::move(y), x.requires_grad());
  Var<S> out{&t, id};
  if (out.requires_grad()) {
    t.nodes[id].back = [xi = x.id, id, R, C, valid](Tape<S>& t) {
      const Tensor<S>& dy = t.nodes[id].grad;
      const Tensor<S>& yv = t.nodes[id].val;
      Tensor<S>& dx = t.grad_of(xi);
      for (int64_t r = 0; r < R; ++r) {
        bool any = false;
        for (int64_t c = 0; c < C; ++c)
          if (valid[r * C + c]) any = true;
        if (!any) continue;  // fallback row is constant
        S dot = S(0);
        for (int64_t c = 0; c < C; ++c) dot += dy[r * C + c] * yv[r * C + c];
        for (int64_t c = 0; c < C; ++c)
          if (valid[r * C + c]) dx[r * C + c] += yv[r * C + c] * (dy[r * C + c] - dot);
      }
    };
  }
  return out;
}

}  // namespace gnfield
