#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "dmc/errors.hpp"
#include "dmc/shape.hpp"

namespace dmc {

// Dense 64-bit float tensor, contiguous row-major. The universal value type:
// feature maps, weights, gradients and scalar losses are all Tensors.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)) {
    check_positive_extents(shape_, "Tensor");
    data_.assign(static_cast<std::size_t>(numel(shape_)), fill);
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_positive_extents(shape_, "Tensor");
    if (static_cast<std::int64_t>(data_.size()) != numel(shape_)) {
      throw ShapeError("Tensor: data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  const std::vector<double>& vec() const { return data_; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline double dot(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("dot: shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  double s = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("max_abs_diff: shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::fabs(a[i] - b[i]));
  }
  return m;
}

inline bool all_finite(const Tensor& t) {
  for (std::int64_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) return false;
  }
  return true;
}

// Integer class-id companion to Tensor: shape is N x spatial (no channel axis).
struct LabelMap {
  Shape shape;
  std::vector<std::int32_t> ids;

  std::int64_t size() const { return static_cast<std::int64_t>(ids.size()); }
};

}  // namespace dmc
