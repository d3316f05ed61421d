#pragma once

#include <algorithm>
#include <cstddef>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace figconv {

/// Error type thrown by every module in the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << std::forward<Args>(args));
  return os.str();
}

}  // namespace detail

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor owning its storage.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size())
      throw Error(detail::cat("tensor: shape ", shape_str(shape_), " holds ", shape_size(shape_),
                              " elements but ", data_.size(), " were given"));
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Shape strides() const {
    Shape st(shape_.size(), 1);
    for (std::size_t i = shape_.size(); i-- > 1;) st[i - 1] = st[i] * shape_[i];
    return st;
  }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  template <typename... Idx>
  T& at(Idx... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... Idx>
  const T& at(Idx... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size())
      throw Error(detail::cat("tensor: index of rank ", idx.size(), " into tensor of rank ", shape_.size()));
    std::size_t off = 0, axis = 0;
    for (std::size_t i : idx) {
      if (i >= shape_[axis])
        throw Error(detail::cat("tensor: index ", i, " out of range on axis ", axis, " (extent ",
                                shape_[axis], ")"));
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Tensor reshaped(Shape shape) const& {
    if (shape_size(shape) != size())
      throw Error(detail::cat("reshape: ", shape_str(shape_), " -> ", shape_str(shape), " changes size"));
    return Tensor(std::move(shape), data_);
  }
  Tensor reshaped(Shape shape) && {
    if (shape_size(shape) != size())
      throw Error(detail::cat("reshape: ", shape_str(shape_), " -> ", shape_str(shape), " changes size"));
    return Tensor(std::move(shape), std::move(data_));
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw Error(detail::cat("max_abs_diff: shapes ", shape_str(a.shape()), " and ", shape_str(b.shape())));
  T m{0};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
  return m;
}

/// Multiply-accumulate tally for convolution routines.
///
/// `dense` counts every kernel tap including zero padding (the closed-form
/// B*Co*Ci*prod(out)*prod(kernel)). `effective` counts only taps that land on
/// real input data and on structurally nonzero kernel entries.
struct MacCount {
  std::uint64_t dense = 0;
  std::uint64_t effective = 0;

  MacCount& operator+=(const MacCount& o) {
    dense += o.dense;
    effective += o.effective;
    return *this;
  }
  friend MacCount operator+(MacCount a, const MacCount& b) { return a += b; }
  friend bool operator==(const MacCount&, const MacCount&) = default;
};

/// Thread-local accumulator that convolution kernels report into while a
/// MacCounter::Scope is alive.
class MacCounter {
 public:
  class Scope {
   public:
    explicit Scope(MacCounter& c) : prev_(active()) { active() = &c; }
    ~Scope() { active() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    MacCounter* prev_;
  };

  static void report(const MacCount& c) {
    if (auto* a = active()) a->total_ += c;
  }

  const MacCount& total() const { return total_; }
  void reset() { total_ = {}; }

 private:
  static MacCounter*& active() {
    thread_local MacCounter* p = nullptr;
    return p;
  }
  MacCount total_;
};

/// Static-partition parallel loop. Each index is processed exactly once by a
/// single worker, so results never depend on the worker count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t workers = 0) {
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    std::size_t lo = n * w / workers, hi = n * (w + 1) / workers;
    pool.emplace_back([lo, hi, &fn, &err = errors[w]] {
      try {
        for (std::size_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        err = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace figconv
