#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace maxca {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

struct TensorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// High-water-mark accounting of live tensor payload bytes. The bench
// command resets the peak before each measured forward pass.
namespace mem {
struct Stats {
  std::size_t live = 0;
  std::size_t peak = 0;
};
inline Stats& stats() {
  static Stats s;
  return s;
}
inline void add(std::size_t bytes) {
  auto& s = stats();
  s.live += bytes;
  s.peak = std::max(s.peak, s.live);
}
inline void sub(std::size_t bytes) { stats().live -= bytes; }
inline void reset_peak() { stats().peak = stats().live; }
}  // namespace mem

// When on, every op result is scanned for NaN/Inf and an exception is
// raised at the producing op instead of letting the value propagate.
inline bool& debug_checks() {
  static bool flag = false;
  return flag;
}

namespace detail {

// std::vector zero-initializes on resize; this allocator leaves scalars
// default-initialized so op outputs that are fully overwritten skip the fill.
template <typename T>
struct DefaultInitAlloc : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = DefaultInitAlloc<U>;
  };
  template <typename U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

}  // namespace detail

struct uninit_t {};
inline constexpr uninit_t uninit{};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(static_cast<std::size_t>(numel_of(shape_)), fill);
    mem::add(bytes());
  }

  // Contents are indeterminate; caller must write every element.
  Tensor(Shape shape, uninit_t) : shape_(std::move(shape)) {
    validate_shape();
    data_.resize(static_cast<std::size_t>(numel_of(shape_)));
    mem::add(bytes());
  }

  static Tensor from_data(Shape shape, const std::vector<T>& values) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.validate_shape();
    if (static_cast<std::int64_t>(values.size()) != numel_of(t.shape_))
      throw TensorError("from_data: value count does not match shape " + shape_str(t.shape_));
    t.data_.assign(values.begin(), values.end());
    mem::add(t.bytes());
    return t;
  }

  static Tensor scalar(T v) { return from_data({}, {v}); }

  Tensor(const Tensor& o) : shape_(o.shape_), data_(o.data_) { mem::add(bytes()); }
  Tensor(Tensor&& o) noexcept : shape_(std::move(o.shape_)), data_(std::move(o.data_)) {
    o.shape_.clear();
  }
  Tensor& operator=(const Tensor& o) {
    if (this != &o) {
      mem::sub(bytes());
      shape_ = o.shape_;
      data_ = o.data_;
      mem::add(bytes());
    }
    return *this;
  }
  Tensor& operator=(Tensor&& o) noexcept {
    if (this != &o) {
      mem::sub(bytes());
      shape_ = std::move(o.shape_);
      data_ = std::move(o.data_);
      o.shape_.clear();
      o.data_.clear();
    }
    return *this;
  }
  ~Tensor() { mem::sub(bytes()); }

  const Shape& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t dim(std::int64_t i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  std::size_t bytes() const { return data_.size() * sizeof(T); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // Row-major offset; last index fastest.
  template <typename... Ix>
  T& at(Ix... ix) {
    return data_[offset({static_cast<std::int64_t>(ix)...})];
  }
  template <typename... Ix>
  const T& at(Ix... ix) const {
    return data_[offset({static_cast<std::int64_t>(ix)...})];
  }

  std::size_t offset(std::initializer_list<std::int64_t> ix) const {
    std::int64_t off = 0;
    std::size_t k = 0;
    for (auto i : ix) {
      off = off * shape_[k] + i;
      ++k;
    }
    return static_cast<std::size_t>(off);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void check_finite(const char* where) const {
    if (!debug_checks()) return;
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v)))
        throw TensorError(std::string("non-finite value produced by ") + where);
  }

 private:
  void validate_shape() const {
    for (auto e : shape_)
      if (e < 1) throw TensorError("tensor extent must be >= 1, got shape " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<T, detail::DefaultInitAlloc<T>> data_;
};

using Rng = std::mt19937_64;

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, T lo, T hi) {
  std::uniform_real_distribution<double> d(static_cast<double>(lo), static_cast<double>(hi));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(d(rng));
}

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, T mean, T stddev) {
  std::normal_distribution<double> d(static_cast<double>(mean), static_cast<double>(stddev));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(d(rng));
}

}  // namespace maxca
