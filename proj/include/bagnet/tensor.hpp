#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bagnet {

// Error taxonomy. The CLI maps these onto exit codes (2 config/usage, 3 I/O,
// 4 numeric), so every throw site picks the narrowest category.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace memory {

// Live and peak byte counts of all tensor and kernel scratch storage.
struct Stats {
  std::atomic<std::int64_t> current{0};
  std::atomic<std::int64_t> peak{0};
};

inline Stats& stats() {
  static Stats s;
  return s;
}

inline void on_alloc(std::size_t bytes) {
  auto& s = stats();
  const auto now = s.current.fetch_add(static_cast<std::int64_t>(bytes)) +
                   static_cast<std::int64_t>(bytes);
  auto prev = s.peak.load();
  while (now > prev && !s.peak.compare_exchange_weak(prev, now)) {
  }
}

inline void on_free(std::size_t bytes) {
  stats().current.fetch_sub(static_cast<std::int64_t>(bytes));
}

inline std::int64_t current_bytes() { return stats().current.load(); }
inline std::int64_t peak_bytes() { return stats().peak.load(); }
inline void reset_peak() { stats().peak.store(stats().current.load()); }

template <class T>
struct TrackedAllocator {
  using value_type = T;
  TrackedAllocator() = default;
  template <class U>
  TrackedAllocator(const TrackedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    on_alloc(n * sizeof(T));
    return std::allocator<T>{}.allocate(n);
  }
  void deallocate(T* p, std::size_t n) noexcept {
    on_free(n * sizeof(T));
    std::allocator<T>{}.deallocate(p, n);
  }
  template <class U>
  bool operator==(const TrackedAllocator<U>&) const noexcept {
    return true;
  }
};

}  // namespace memory

template <class T>
using Buffer = std::vector<T, memory::TrackedAllocator<T>>;

/// Dense row-major n-d array (last dimension fastest).
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::span<const T> values) : shape_(std::move(shape)) {
    if (values.size() != shape_numel(shape_))
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape_));
    data_.assign(values.begin(), values.end());
  }
  Tensor(Shape shape, std::initializer_list<T> values)
      : Tensor(std::move(shape), std::span<const T>(values.begin(), values.size())) {}

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t c, std::size_t i, std::size_t j) {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }
  const T& at(std::size_t c, std::size_t i, std::size_t j) const {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }
  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    Tensor out = *this;
    out.shape_ = std::move(s);
    return out;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  Buffer<T> data_;
};

/// Bitwise equality; distinguishes -0.0 from 0.0 and compares NaN payloads.
template <class T>
bool bit_identical(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin(),
                    [](T x, T y) { return std::memcmp(&x, &y, sizeof(T)) == 0; });
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
template <class T>
T max_rel_diff(const Tensor<T>& a, const Tensor<T>& b, T floor = T(1e-6)) {
  if (a.shape() != b.shape())
    throw ShapeError("max_rel_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T den = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    m = std::max(m, std::abs(a[i] - b[i]) / den);
  }
  return m;
}

}  // namespace bagnet
