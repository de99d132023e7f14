#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "revcol/common.hpp"
#include "revcol/memtrack.hpp"

namespace revcol {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& dims) {
  std::int64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

inline std::string shape_str(const Shape& dims) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
  os << "]";
  return os.str();
}

namespace detail {

template <class T>
struct Storage {
  std::vector<T> data;

  explicit Storage(std::int64_t n, MemTag tag) : data(static_cast<std::size_t>(n)) {
    MemoryTracker::instance().on_alloc(this, data.size() * sizeof(T), tag);
  }
  ~Storage() { MemoryTracker::instance().on_free(this); }
  Storage(const Storage&) = delete;
  Storage& operator=(const Storage&) = delete;
};

}  // namespace detail

// Dense row-major tensor. Activations use the N,C,H,W ordering. Copies
// share storage; the library treats a tensor as immutable once it has been
// published (handed to another op or saved on a tape), so in-place mutation
// is reserved for freshly allocated buffers (gradient accumulation, init).
template <class T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape dims, MemTag tag = MemTag::activation) {
    return Tensor(std::move(dims), tag);
  }
  static Tensor full(Shape dims, T value, MemTag tag = MemTag::activation) {
    Tensor t(std::move(dims), tag);
    std::fill(t.data(), t.data() + t.numel(), value);
    return t;
  }
  static Tensor from(Shape dims, std::vector<T> values, MemTag tag = MemTag::activation) {
    Tensor t(std::move(dims), tag);
    if (static_cast<std::int64_t>(values.size()) != t.numel())
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(t.dims()));
    std::copy(values.begin(), values.end(), t.data());
    return t;
  }
  static Tensor scalar(T value) { return full({1}, value); }

  bool defined() const { return storage_ != nullptr; }
  const Shape& dims() const { return dims_; }
  std::int64_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t rank() const { return dims_.size(); }
  std::int64_t numel() const { return shape_numel(dims_); }

  T* data() { return storage_->data.data(); }
  const T* data() const { return storage_->data.data(); }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(dims_));
    return data()[0];
  }

  Tensor clone() const {
    Tensor out = zeros(dims_);
    std::memcpy(out.data(), data(), sizeof(T) * static_cast<std::size_t>(numel()));
    return out;
  }

  Tensor reshaped(Shape dims) const {
    if (shape_numel(dims) != numel())
      throw ShapeError("reshape " + shape_str(dims_) + " -> " + shape_str(dims) + " changes element count");
    Tensor out = *this;
    out.dims_ = std::move(dims);
    return out;
  }

  void mark_parameter() {
    if (storage_) MemoryTracker::instance().retag(storage_.get(), MemTag::parameter);
  }

  long storage_use_count() const { return storage_ ? storage_.use_count() : 0; }
  const void* storage_key() const { return storage_.get(); }

  void add_(const Tensor& other) {
    check_same_shape(other, "add_");
    T* a = data();
    const T* b = other.data();
    const std::int64_t n = numel();
    for (std::int64_t i = 0; i < n; ++i) a[i] += b[i];
  }

  void check_same_shape(const Tensor& other, const char* what) const {
    if (dims_ != other.dims_)
      throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(dims_) + " vs " +
                       shape_str(other.dims_));
  }

  bool all_finite() const {
    const T* p = data();
    const std::int64_t n = numel();
    for (std::int64_t i = 0; i < n; ++i)
      if (!std::isfinite(static_cast<double>(p[i]))) return false;
    return true;
  }

 private:
  Tensor(Shape dims, MemTag tag) : dims_(std::move(dims)) {
    for (auto d : dims_)
      if (d < 1) throw ShapeError("tensor extent must be >= 1, got shape " + shape_str(dims_));
    storage_ = std::make_shared<detail::Storage<T>>(shape_numel(dims_), tag);
  }

  Shape dims_;
  std::shared_ptr<detail::Storage<T>> storage_;
};

// Channel axis convention: axis 0 for vectors, axis 1 otherwise. This is
// what layer_norm and the channel-wise scale reduce over.
inline std::int64_t channel_extent(const Shape& dims) {
  return dims.size() == 1 ? dims[0] : dims[1];
}

// Decomposes a shape into (outer, C, inner) so that flat index
// o*C*inner + c*inner + i walks the channel axis with stride `inner`.
inline void channel_split(const Shape& dims, std::int64_t& outer, std::int64_t& channels,
                          std::int64_t& inner) {
  if (dims.size() == 1) {
    outer = 1;
    channels = dims[0];
    inner = 1;
    return;
  }
  outer = dims[0];
  channels = dims[1];
  inner = 1;
  for (std::size_t i = 2; i < dims.size(); ++i) inner *= dims[i];
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  a.check_same_shape(b, "max_abs_diff");
  double m = 0;
  const T* pa = a.data();
  const T* pb = b.data();
  for (std::int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(pa[i]) - static_cast<double>(pb[i])));
  return m;
}

template <class T>
double max_rel_diff(const Tensor<T>& a, const Tensor<T>& b, double floor = 1e-12) {
  a.check_same_shape(b, "max_rel_diff");
  double m = 0;
  const T* pa = a.data();
  const T* pb = b.data();
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double x = static_cast<double>(pa[i]);
    const double y = static_cast<double>(pb[i]);
    m = std::max(m, std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}));
  }
  return m;
}

template <class T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dims() != b.dims()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(T) * static_cast<std::size_t>(a.numel())) == 0;
}

}  // namespace revcol
