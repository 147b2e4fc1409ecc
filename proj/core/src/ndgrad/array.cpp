#include "flowdpt/ndgrad/array.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace flowdpt::nd {

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

ShapeError::ShapeError(const std::string& op, const Shape& a, const Shape& b)
    : std::invalid_argument(op + ": shape mismatch " + shape_string(a) + " vs " +
                            shape_string(b)) {}

namespace {
void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("Array: shape must have at least one axis");
  for (auto d : shape) {
    if (d == 0) throw ShapeError("Array: zero-length axis in " + shape_string(shape));
  }
}
}  // namespace

Array::Array(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_size(shape_), fill);
}

Array::Array(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (data_.size() != shape_size(shape_)) {
    throw ShapeError("Array: data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_string(shape_));
  }
}

Array Array::row(std::span<const double> values) {
  return Array({1, values.size()}, std::vector<double>(values.begin(), values.end()));
}

Array Array::row(std::initializer_list<double> values) {
  return Array({1, values.size()}, std::vector<double>(values));
}

Array Array::matrix(std::size_t rows, std::size_t cols,
                    std::initializer_list<double> values) {
  return Array({rows, cols}, std::vector<double>(values));
}

double Array::item() const {
  if (data_.size() != 1) {
    throw ShapeError("Array::item: expected a single element, got shape " +
                     shape_string(shape_));
  }
  return data_[0];
}

void Array::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Array::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double x) { return std::isfinite(x); });
}

}  // namespace flowdpt::nd
