#pragma once

#include <array>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gnfield {

// Dense row-major tensor shape, up to 4 dimensions.
struct Shape {
  std::array<int64_t, 4> d{1, 1, 1, 1};
  int nd = 0;

  Shape() = default;
  Shape(std::initializer_list<int64_t> dims) {
    assert(dims.size() <= 4);
    nd = static_cast<int>(dims.size());
    int i = 0;
    for (int64_t x : dims) d[i++] = x;
  }

  int64_t operator[](int i) const { return d[i]; }
  int64_t numel() const {
    int64_t n = 1;
    for (int i = 0; i < nd; ++i) n *= d[i];
    return n;
  }
  bool operator==(const Shape& o) const {
    if (nd != o.nd) return false;
    for (int i = 0; i < nd; ++i)
      if (d[i] != o.d[i]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    os << "[";
    for (int i = 0; i < nd; ++i) os << d[i] << (i + 1 < nd ? "," : "");
    os << "]";
    return os.str();
  }
};

template <class S>
struct Tensor {
  Shape shape;
  std::vector<S> v;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(s), v(static_cast<size_t>(s.numel()), S(0)) {}
  Tensor(Shape s, S fill) : shape(s), v(static_cast<size_t>(s.numel()), fill) {}

  static Tensor zeros(Shape s) { return Tensor(s); }
  static Tensor full(Shape s, S x) { return Tensor(s, x); }
  static Tensor scalar(S x) { return Tensor(Shape{1}, x); }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  bool empty() const { return v.empty(); }
  int64_t dim(int i) const { return shape[i]; }

  S* data() { return v.data(); }
  const S* data() const { return v.data(); }

  S& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
  S operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

  S& at(int64_t i, int64_t j) { return v[static_cast<size_t>(i * shape[1] + j)]; }
  S at(int64_t i, int64_t j) const { return v[static_cast<size_t>(i * shape[1] + j)]; }
  S& at(int64_t i, int64_t j, int64_t k) {
    return v[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
  }
  S at(int64_t i, int64_t j, int64_t k) const {
    return v[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
  }
  S& at(int64_t i, int64_t j, int64_t k, int64_t l) {
    return v[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
  }
  S at(int64_t i, int64_t j, int64_t k, int64_t l) const {
    return v[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
  }

  // Same buffer, new shape; sizes must match.
  Tensor reshaped(Shape s) const {
    if (s.numel() != numel())
      throw std::invalid_argument("reshape " + shape.str() + " -> " + s.str());
    Tensor t = *this;
    t.shape = s;
    return t;
  }

  // Treat as a 2D matrix whose columns are the last dimension.
  int64_t last_dim() const { return shape.nd == 0 ? 1 : shape[shape.nd - 1]; }
  int64_t rows2d() const { return last_dim() == 0 ? 0 : numel() / last_dim(); }

  bool all_finite() const {
    for (S x : v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> t;
    t.shape = shape;
    t.v.resize(v.size());
    for (size_t i = 0; i < v.size(); ++i) t.v[i] = static_cast<T>(v[i]);
    return t;
  }
};

}  // namespace gnfield
