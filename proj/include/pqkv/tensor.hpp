#pragma once

// Dense row-major tensor of float32 or int32. Deliberately minimal: the
// simulator works at desk scale, so there is no striding, no views, no
// broadcasting. Dimension products are overflow-checked on construction.

#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "pqkv/error.hpp"

namespace pqkv {

enum class Dtype : std::uint8_t { f32 = 0, i32 = 1 };

inline std::size_t dtype_size(Dtype d) {
  return d == Dtype::f32 ? 4 : 4;
}

inline const char* dtype_name(Dtype d) {
  return d == Dtype::f32 ? "float32" : "int32";
}

// Multiplies dims, rejecting 64-bit overflow. A zero dim yields zero elements.
inline std::uint64_t checked_element_count(const std::vector<std::uint64_t>& dims) {
  std::uint64_t n = 1;
  for (std::uint64_t d : dims) {
    if (d != 0 && n > std::numeric_limits<std::uint64_t>::max() / d) {
      throw FormatError("tensor dimension product overflows 64 bits");
    }
    n *= d;
  }
  return n;
}

class Tensor {
 public:
  Tensor() = default;

  Tensor(std::vector<std::uint64_t> dims, Dtype dtype)
      : dims_(std::move(dims)), dtype_(dtype) {
    std::uint64_t n = checked_element_count(dims_);
    if (dtype_ == Dtype::f32) {
      f32_.assign(static_cast<std::size_t>(n), 0.0f);
    } else {
      i32_.assign(static_cast<std::size_t>(n), 0);
    }
  }

  static Tensor from_f32(std::vector<std::uint64_t> dims, std::vector<float> data) {
    Tensor t;
    t.dims_ = std::move(dims);
    t.dtype_ = Dtype::f32;
    if (checked_element_count(t.dims_) != data.size()) {
      throw ShapeError("float payload does not match dims");
    }
    t.f32_ = std::move(data);
    return t;
  }

  static Tensor from_i32(std::vector<std::uint64_t> dims, std::vector<std::int32_t> data) {
    Tensor t;
    t.dims_ = std::move(dims);
    t.dtype_ = Dtype::i32;
    if (checked_element_count(t.dims_) != data.size()) {
      throw ShapeError("int payload does not match dims");
    }
    t.i32_ = std::move(data);
    return t;
  }

  Dtype dtype() const { return dtype_; }
  const std::vector<std::uint64_t>& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }

  std::uint64_t elements() const {
    return dtype_ == Dtype::f32 ? f32_.size() : i32_.size();
  }

  std::vector<float>& f32() {
    require(Dtype::f32);
    return f32_;
  }
  const std::vector<float>& f32() const {
    require(Dtype::f32);
    return f32_;
  }
  std::vector<std::int32_t>& i32() {
    require(Dtype::i32);
    return i32_;
  }
  const std::vector<std::int32_t>& i32() const {
    require(Dtype::i32);
    return i32_;
  }

  // Flattening rule used by the quantizer and the cache: dim 0 is the token
  // axis, everything after it folds into one channel axis.
  std::uint64_t tokens() const {
    if (dims_.empty()) throw ShapeError("rank-0 tensor has no token axis");
    return dims_[0];
  }
  std::uint64_t channels() const {
    if (dims_.empty()) throw ShapeError("rank-0 tensor has no channel axis");
    std::uint64_t c = 1;
    for (std::size_t i = 1; i < dims_.size(); ++i) c *= dims_[i];
    return c;
  }

  bool same_shape(const Tensor& o) const {
    return dims_ == o.dims_ && dtype_ == o.dtype_;
  }

 private:
  void require(Dtype d) const {
    if (dtype_ != d) {
      throw FormatError(std::string("tensor holds ") + dtype_name(dtype_) +
                        ", expected " + dtype_name(d));
    }
  }

  std::vector<std::uint64_t> dims_;
  Dtype dtype_ = Dtype::f32;
  std::vector<float> f32_;
  std::vector<std::int32_t> i32_;
};

}  // namespace pqkv
