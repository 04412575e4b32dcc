#include "mirrorla/array.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mirrorla {

namespace memory {

Counters& counters() {
  thread_local Counters c;
  return c;
}

PeakScope::PeakScope() : baseline_(counters().current), saved_peak_(counters().peak) {
  counters().peak = baseline_;
}

PeakScope::~PeakScope() {
  auto& c = counters();
  c.peak = std::max(c.peak, saved_peak_);
}

std::size_t PeakScope::peak_bytes() const { return counters().peak - baseline_; }

}  // namespace memory

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

namespace {

void check_extents(const Shape& shape) {
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeError("array extents must be >= 1, got " + to_string(shape));
  }
}

}  // namespace

Array::Array() : data_(1, 0.0) {}

Array::Array(Shape shape, double fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(element_count(shape_), fill);
}

Array::Array(Shape shape, std::initializer_list<double> values)
    : Array(std::move(shape), std::span<const double>(values.begin(), values.size())) {}

Array::Array(Shape shape, std::span<const double> values) : shape_(std::move(shape)) {
  check_extents(shape_);
  if (values.size() != element_count(shape_)) {
    throw ShapeError("shape " + to_string(shape_) + " needs " +
                     std::to_string(element_count(shape_)) + " values, got " +
                     std::to_string(values.size()));
  }
  data_.assign(values.begin(), values.end());
}

std::size_t Array::extent(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(shape_));
  }
  return shape_[axis];
}

std::size_t Array::checked_offset(std::initializer_list<std::size_t> idx) const {
  if (idx.size() != shape_.size()) {
    throw std::out_of_range("index rank " + std::to_string(idx.size()) +
                            " does not match array rank " + std::to_string(shape_.size()));
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (std::size_t i : idx) {
    if (i >= shape_[axis]) {
      throw std::out_of_range("index " + std::to_string(i) + " out of range on axis " +
                              std::to_string(axis) + " of " + to_string(shape_));
    }
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

Array Array::reshaped(Shape shape) const {
  if (element_count(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  return Array(std::move(shape), std::span<const double>(data_));
}

void Array::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Array::operator==(const Array& other) const {
  return shape_ == other.shape_ && data_ == other.data_;
}

void require_shape(const Array& a, const Shape& expected, const char* what) {
  if (a.shape() != expected) {
    throw ShapeError(std::string(what) + ": expected shape " + to_string(expected) + ", got " +
                     to_string(a.shape()));
  }
}

void require_rank(const Array& a, std::size_t rank, const char* what) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(a.shape()));
  }
}

double max_abs(const Array& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Array& a, const Array& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + " differ");
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool all_finite(const Array& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace mirrorla
