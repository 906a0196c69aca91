#pragma once

#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace ofit {

// Dense row-major tensor. Rank is 1 or 2 everywhere in this project.
template <class T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims, T fill = T(0))
      : shape(std::move(dims)), data(element_count(shape), fill) {}

  static std::size_t element_count(const std::vector<std::size_t>& dims) {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                           [](std::size_t a, std::size_t b) { return a * b; });
  }

  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  T* row(std::size_t r) { return data.data() + r * cols(); }
  const T* row(std::size_t r) const { return data.data() + r * cols(); }

  T& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  std::span<T> span() { return data; }
  std::span<const T> span() const { return data; }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

// Ordered (name, tensor) list; the canonical form for gradients and
// optimizer state.
template <class T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

}  // namespace ofit
