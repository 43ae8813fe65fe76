#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "msaw/errors.hpp"

namespace msaw {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

template <typename T>
bool all_finite(std::span<const T> values) {
  using Array = Eigen::Array<T, Eigen::Dynamic, 1>;
  return Eigen::Map<const Array>(values.data(), static_cast<Eigen::Index>(values.size())).allFinite();
}

/// Dense row-major array with an optional gradient buffer.
///
/// A Tensor is a cheap shared handle: copies alias the same storage, so a
/// parameter held by a model and the same parameter captured on a tape are
/// one object. Use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
  };

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    validate_shape(shape);
    node_->data.assign(numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
    if (!std::isfinite(fill)) throw NumericError("tensor fill value is not finite");
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : Tensor(std::move(shape), std::move(data), requires_grad, nullptr) {
    if (!all_finite<T>(node_->data)) throw NumericError("tensor data contains non-finite values");
  }

  /// Skips the finiteness scan; for op outputs that were already checked.
  Tensor(Shape shape, std::vector<T> data, bool requires_grad, std::nullptr_t)
      : node_(std::make_shared<Node>()) {
    validate_shape(shape);
    if (numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  T operator[](std::size_t i) const { return node_->data[i]; }

  T item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }

  /// Gradient buffer, zero-allocated on first access.
  std::span<T> grad_buffer() const {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T{0});
    return node_->grad;
  }

  void zero_grad() const { std::fill(node_->grad.begin(), node_->grad.end(), T{0}); }
  void clear_grad() const { node_->grad.clear(); }

  Tensor clone() const {
    Tensor out;
    out.node_ = std::make_shared<Node>(*node_);
    return out;
  }

  /// Same values, no gradient, no aliasing.
  Tensor detach() const {
    Tensor out;
    out.node_ = std::make_shared<Node>();
    out.node_->shape = node_->shape;
    out.node_->data = node_->data;
    return out;
  }

  /// Copy of the values under a new shape of equal element count.
  Tensor reshaped(Shape shape) const {
    if (numel(shape) != size()) {
      throw DimensionError("cannot reshape " + to_string(this->shape()) + " to " + to_string(shape));
    }
    Tensor out = clone();
    out.node_->shape = std::move(shape);
    return out;
  }

  const std::shared_ptr<Node>& node() const { return node_; }
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
    for (std::size_t extent : shape) {
      if (extent == 0) throw DimensionError("tensor extents must be positive: " + to_string(shape));
    }
  }

  std::shared_ptr<Node> node_;
};

}  // namespace msaw
