#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "ctsfda/errors.hpp"

namespace ctsfda {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major tensor.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(numel(shape), T(0)) {}
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::int64_t>(data.size()) != numel(shape))
      throw ShapeError("tensor data size does not match shape " +
                       shape_str(shape));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, T v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor ones(Shape s) { return full(std::move(s), T(1)); }

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  std::int64_t dim(std::size_t i) const { return shape.at(i); }

  T* begin() { return data.data(); }
  T* end() { return data.data() + data.size(); }
  const T* begin() const { return data.data(); }
  const T* end() const { return data.data() + data.size(); }

  T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const {
    return data[static_cast<std::size_t>(i)];
  }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

template <typename T>
Tensor<T> randn(Shape s, std::mt19937_64& rng, T stddev = T(1)) {
  Tensor<T> t(std::move(s));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : t.data) v = static_cast<T>(dist(rng)) * stddev;
  return t;
}

template <typename T>
Tensor<T> uniform(Shape s, std::mt19937_64& rng, T lo, T hi) {
  Tensor<T> t(std::move(s));
  std::uniform_real_distribution<double> dist(static_cast<double>(lo),
                                              static_cast<double>(hi));
  for (auto& v : t.data) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                        const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": shape mismatch " +
                     shape_str(a.shape) + " vs " + shape_str(b.shape));
}

}  // namespace ctsfda
