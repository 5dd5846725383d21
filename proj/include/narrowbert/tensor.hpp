#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace narrowbert {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_to_string(const std::vector<std::size_t>& shape);

// Dense row-major array. The last dimension is the "column" axis; every other
// axis is folded into rows, so a [B x L x d] hidden state is a (B*L) x d
// matrix for the kernels.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, T fill = T(0))
      : shape_(std::move(shape)) {
    check_shape();
    data_.assign(product(shape_), fill);
  }

  Tensor(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (product(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_to_string(shape_));
    }
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const {
    return shape_.empty() ? 0 : data_.size() / shape_.back();
  }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T* row(std::size_t r) { return data_.data() + r * cols(); }
  const T* row(std::size_t r) const { return data_.data() + r * cols(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const {
    return data_[r * cols() + c];
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  // Same buffer, new shape; element count must match.
  Tensor reshaped(std::vector<std::size_t> shape) const& {
    return Tensor(std::move(shape), data_);
  }
  Tensor reshaped(std::vector<std::size_t> shape) && {
    return Tensor(std::move(shape), std::move(data_));
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  static std::size_t product(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           std::multiplies<>());
  }

  void check_shape() const {
    if (shape_.empty()) throw ShapeError("tensor shape must have rank >= 1");
    for (std::size_t dim : shape_) {
      if (dim == 0) {
        throw ShapeError("tensor dimension of size 0 in " +
                         shape_to_string(shape_));
      }
    }
  }

  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

// A trainable value and its accumulated gradient.
template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  explicit Parameter(Tensor<T> v) : value(std::move(v)), grad(value.shape()) {}
  explicit Parameter(std::vector<std::size_t> shape, T fill = T(0))
      : value(shape, fill), grad(shape) {}

  void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
struct NamedParameter {
  std::string name;
  Parameter<T>* param;
};

template <typename T>
struct ConstNamedParameter {
  std::string name;
  const Parameter<T>* param;
};

}  // namespace narrowbert
