#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

#include "dime/common.hpp"

namespace dime {

// Dense row-major value container. Rank 0 holds one scalar.
template <class T>
struct TensorData {
  Shape shape;
  std::vector<T> data;

  TensorData() = default;

  explicit TensorData(Shape s) : shape(std::move(s)), data(numel(shape), T(0)) {}

  TensorData(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (static_cast<std::int64_t>(data.size()) != numel(shape))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  static TensorData scalar(T v) { return TensorData(Shape{}, std::vector<T>{v}); }

  static TensorData vector(std::vector<T> values) {
    Shape s{static_cast<int>(values.size())};
    return TensorData(std::move(s), std::move(values));
  }

  template <class U>
  static TensorData from(std::span<const U> values) {
    std::vector<T> v(values.begin(), values.end());
    return vector(std::move(v));
  }

  static TensorData matrix(int rows, int cols, std::vector<T> values) {
    return TensorData(Shape{rows, cols}, std::move(values));
  }

  int rank() const { return static_cast<int>(shape.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  int rows() const { return rank() == 2 ? shape[0] : 1; }
  int cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 1); }

  T& at(int i) { return data[static_cast<std::size_t>(i)]; }
  const T& at(int i) const { return data[static_cast<std::size_t>(i)]; }
  T& at(int r, int c) { return data[static_cast<std::size_t>(r) * shape[1] + c]; }
  const T& at(int r, int c) const { return data[static_cast<std::size_t>(r) * shape[1] + c]; }

  bool finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

template <class T>
double l2_norm(std::span<const T> v) {
  double acc = 0;
  for (T x : v) acc += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(acc);
}

// Index of the largest element; ties go to the lowest index.
template <class T>
int argmax(std::span<const T> v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) best = i;
  return best;
}

}  // namespace dime
