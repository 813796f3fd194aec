#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sliceattn/error.hpp"

namespace sliceattn {

using Shape = std::vector<std::size_t>;

inline constexpr std::size_t kMaxRank = 4;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major tensor of doubles, rank 0..4. Plain value type: copying a
// Tensor copies its data (and gradient, if any).
class Tensor {
 public:
  Tensor() : shape_{}, data_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    check_rank();
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_rank();
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                           shape_str(shape_));
    }
    return shape_[axis];
  }
  std::size_t numel() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  double item() const {
    if (data_.size() != 1) {
      throw ContractError("item() on tensor of shape " + shape_str(shape_));
    }
    return data_[0];
  }

  // Row-major offset for up to four indices; unused trailing indices are 0.
  std::size_t offset(std::size_t i0, std::size_t i1 = 0, std::size_t i2 = 0,
                     std::size_t i3 = 0) const {
    const std::size_t idx[kMaxRank] = {i0, i1, i2, i3};
    std::size_t off = 0;
    for (std::size_t a = 0; a < shape_.size(); ++a) off = off * shape_[a] + idx[a];
    return off;
  }
  double& at(std::size_t i0, std::size_t i1 = 0, std::size_t i2 = 0, std::size_t i3 = 0) {
    return data_[offset(i0, i1, i2, i3)];
  }
  double at(std::size_t i0, std::size_t i1 = 0, std::size_t i2 = 0,
            std::size_t i3 = 0) const {
    return data_[offset(i0, i1, i2, i3)];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  // Gradient bookkeeping. `grad` is absent until a backward pass reaches the
  // tensor; when present its length equals numel().
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;

  void zero_grad() { grad.reset(); }
  std::vector<double>& ensure_grad() {
    if (!grad) grad.emplace(data_.size(), 0.0);
    return *grad;
  }

 private:
  void check_rank() const {
    if (shape_.size() > kMaxRank) {
      throw DimensionError("rank " + std::to_string(shape_.size()) + " exceeds 4");
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

// Views a shape as outer x n x inner around `axis`.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

inline AxisSplit split_at_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t a = 0; a < axis; ++a) s.outer *= shape[a];
  s.n = shape[axis];
  for (std::size_t a = axis + 1; a < shape.size(); ++a) s.inner *= shape[a];
  return s;
}

}  // namespace sliceattn
