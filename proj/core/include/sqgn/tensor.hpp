#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sqgn/errors.hpp"

namespace sqgn {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool same_shape(const Shape& a, const Shape& b);

/// Dense row-major array of doubles. Immutable once handed out: operations
/// build a fresh buffer and never mutate operands, so copies are O(1)
/// (shared buffer) and tensors are safe to share read-only across threads.
class Tensor {
public:
  Tensor() : shape_{0}, size_(0) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor scalar(double v);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor from(Shape shape, std::initializer_list<double> values);
  /// Allocated but uninitialized; caller fills via mutable_data() before sharing.
  static Tensor uninit(Shape shape);

  const Shape& shape() const { return shape_; }
  int64_t size() const { return size_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t extent(int64_t axis) const { return shape_[static_cast<size_t>(axis)]; }

  std::span<const double> data() const { return {data_.get(), static_cast<size_t>(size_)}; }
  std::span<double> mutable_data() { return {data_.get(), static_cast<size_t>(size_)}; }
  double operator[](int64_t flat) const { return data_.get()[flat]; }

  /// Value of a single-element tensor.
  double scalar_value() const;

  /// Same buffer, new shape (element count must match).
  Tensor reshaped(Shape shape) const;

  bool all_finite() const;

private:
  Shape shape_;
  std::shared_ptr<double[]> data_;
  int64_t size_;
};

/// Matrix product of rank-2 tensors; inner dimensions must match.
Tensor gemm(const Tensor& a, const Tensor& b);
/// gemm(a^T, b): a is (K,R), b is (K,C), result (R,C).
Tensor gemm_tn(const Tensor& a, const Tensor& b);
/// gemm(a, b^T): a is (R,K), b is (C,K), result (R,C).
Tensor gemm_nt(const Tensor& a, const Tensor& b);

/// Sum of elementwise products, accumulated left to right (fixed order for
/// bit-reproducibility). Element counts must match; shapes may differ.
double dot(const Tensor& a, const Tensor& b);

/// alpha*x + y, elementwise; shapes must be equal.
Tensor axpy(double alpha, const Tensor& x, const Tensor& y);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor transpose(const Tensor& a);

double sum(const Tensor& a);
double norm2(const Tensor& a);
double max_abs(const Tensor& a);

} // namespace sqgn
