#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mirrorla {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace memory {

// Per-thread accounting of bytes held by Array storage. Every Array buffer is
// allocated through TrackingAllocator, so the counters see all tensor
// temporaries created inside a call.
struct Counters {
  std::size_t current = 0;
  std::size_t peak = 0;
};

Counters& counters();

// Records the peak number of Array bytes allocated above the level at
// construction time.
class PeakScope {
 public:
  PeakScope();
  PeakScope(const PeakScope&) = delete;
  PeakScope& operator=(const PeakScope&) = delete;
  ~PeakScope();

  std::size_t peak_bytes() const;

 private:
  std::size_t baseline_;
  std::size_t saved_peak_;
};

template <class T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() = default;
  template <class U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    T* p = std::allocator<T>{}.allocate(n);
    auto& c = counters();
    c.current += n * sizeof(T);
    if (c.current > c.peak) c.peak = c.current;
    return p;
  }

  void deallocate(T* p, std::size_t n) noexcept {
    counters().current -= n * sizeof(T);
    std::allocator<T>{}.deallocate(p, n);
  }

  template <class U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};

}  // namespace memory

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

// Dense row-major array of doubles. Every extent is at least 1.
class Array {
 public:
  using Storage = std::vector<double, memory::TrackingAllocator<double>>;

  // Rank-0 array holding a single zero.
  Array();
  explicit Array(Shape shape, double fill = 0.0);
  Array(Shape shape, std::initializer_list<double> values);
  Array(Shape shape, std::span<const double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  std::size_t bytes() const { return data_.size() * sizeof(double); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* raw() { return data_.data(); }
  const double* raw() const { return data_.data(); }

  double& operator[](std::size_t flat) { return data_[flat]; }
  double operator[](std::size_t flat) const { return data_[flat]; }

  // Bounds-checked multi-index access.
  template <class... I>
  double& at(I... idx) {
    return data_[checked_offset({static_cast<std::size_t>(idx)...})];
  }
  template <class... I>
  double at(I... idx) const {
    return data_[checked_offset({static_cast<std::size_t>(idx)...})];
  }

  // Multi-index access; bounds-checked when MIRRORLA_BOUNDS_CHECKS is set.
  template <class... I>
  double& operator()(I... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <class... I>
  double operator()(I... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  Array reshaped(Shape shape) const;
  void fill(double value);

  bool operator==(const Array& other) const;

 private:
  std::size_t checked_offset(std::initializer_list<std::size_t> idx) const;
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
#ifdef MIRRORLA_BOUNDS_CHECKS
    return checked_offset(idx);
#else
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) off = off * shape_[axis++] + i;
    return off;
#endif
  }

  Shape shape_;
  Storage data_;
};

void require_shape(const Array& a, const Shape& expected, const char* what);
void require_rank(const Array& a, std::size_t rank, const char* what);

double max_abs(const Array& a);
double max_abs_diff(const Array& a, const Array& b);
bool all_finite(const Array& a);

}  // namespace mirrorla
