#include "sqgn/tensor.hpp"

#include <cmath>
#include <cstring>

#include <Eigen/Core>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace sqgn {

namespace {

#if defined(__GLIBC__)
// Large tensor buffers churn every iteration; without this glibc serves them
// via mmap and returns the pages to the kernel on free, so each forward pass
// pays the page faults again.
const struct MallocTuning {
  MallocTuning() {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
  }
} malloc_tuning;
#endif

using MatrixMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using MutableMatrixMap =
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!same_shape(a.shape(), b.shape()))
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " +
                         shape_str(t.shape()));
}

} // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

Tensor Tensor::uninit(Shape shape) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.size_ = shape_numel(t.shape_);
  t.data_ = std::shared_ptr<double[]>(new double[static_cast<size_t>(t.size_)]);
  return t;
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double v) {
  Tensor t = uninit(std::move(shape));
  for (double& x : t.mutable_data()) x = v;
  return t;
}

Tensor Tensor::scalar(double v) { return full({1}, v); }

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw DimensionError("Tensor::from: " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  Tensor t = uninit(std::move(shape));
  std::memcpy(t.mutable_data().data(), values.data(), values.size() * sizeof(double));
  return t;
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values) {
  return from(std::move(shape), std::vector<double>(values));
}

double Tensor::scalar_value() const {
  if (size() != 1)
    throw ContractError("scalar_value: tensor has " + std::to_string(size()) + " elements");
  return data_.get()[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != size())
    throw DimensionError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data())
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor gemm(const Tensor& a, const Tensor& b) {
  require_rank2(a, "gemm");
  require_rank2(b, "gemm");
  if (a.extent(1) != b.extent(0))
    throw DimensionError("gemm: inner dimensions differ, " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()));
  Tensor c = Tensor::uninit({a.extent(0), b.extent(1)});
  MatrixMap ma(a.data().data(), a.extent(0), a.extent(1));
  MatrixMap mb(b.data().data(), b.extent(0), b.extent(1));
  MutableMatrixMap mc(c.mutable_data().data(), a.extent(0), b.extent(1));
  mc.noalias() = ma * mb;
  return c;
}

Tensor gemm_tn(const Tensor& a, const Tensor& b) {
  require_rank2(a, "gemm_tn");
  require_rank2(b, "gemm_tn");
  if (a.extent(0) != b.extent(0))
    throw DimensionError("gemm_tn: leading dimensions differ, " + shape_str(a.shape()) + "^T * " +
                         shape_str(b.shape()));
  Tensor c = Tensor::uninit({a.extent(1), b.extent(1)});
  MatrixMap ma(a.data().data(), a.extent(0), a.extent(1));
  MatrixMap mb(b.data().data(), b.extent(0), b.extent(1));
  MutableMatrixMap mc(c.mutable_data().data(), a.extent(1), b.extent(1));
  mc.noalias() = ma.transpose() * mb;
  return c;
}

Tensor gemm_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "gemm_nt");
  require_rank2(b, "gemm_nt");
  if (a.extent(1) != b.extent(1))
    throw DimensionError("gemm_nt: trailing dimensions differ, " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()) + "^T");
  Tensor c = Tensor::uninit({a.extent(0), b.extent(0)});
  MatrixMap ma(a.data().data(), a.extent(0), a.extent(1));
  MatrixMap mb(b.data().data(), b.extent(0), b.extent(1));
  MutableMatrixMap mc(c.mutable_data().data(), a.extent(0), b.extent(0));
  mc.noalias() = ma * mb.transpose();
  return c;
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size())
    throw DimensionError("dot: element counts differ, " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  const auto da = a.data();
  const auto db = b.data();
  double acc = 0.0;
  for (size_t i = 0; i < da.size(); ++i) acc += da[i] * db[i];
  return acc;
}

Tensor axpy(double alpha, const Tensor& x, const Tensor& y) {
  require_same_shape(x, y, "axpy");
  Tensor out = Tensor::uninit(x.shape());
  const double* dx = x.data().data();
  const double* dy = y.data().data();
  double* dst = out.mutable_data().data();
  const int64_t n = out.size();
#pragma omp parallel for schedule(static) if (n > 65536)
  for (int64_t i = 0; i < n; ++i) dst[i] = alpha * dx[i] + dy[i];
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::uninit(a.shape());
  const double* da = a.data().data();
  const double* db = b.data().data();
  double* dst = out.mutable_data().data();
  const int64_t n = out.size();
#pragma omp parallel for schedule(static) if (n > 65536)
  for (int64_t i = 0; i < n; ++i) dst[i] = da[i] + db[i];
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = Tensor::uninit(a.shape());
  const double* da = a.data().data();
  const double* db = b.data().data();
  double* dst = out.mutable_data().data();
  const int64_t n = out.size();
#pragma omp parallel for schedule(static) if (n > 65536)
  for (int64_t i = 0; i < n; ++i) dst[i] = da[i] - db[i];
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::uninit(a.shape());
  const double* da = a.data().data();
  const double* db = b.data().data();
  double* dst = out.mutable_data().data();
  const int64_t n = out.size();
#pragma omp parallel for schedule(static) if (n > 65536)
  for (int64_t i = 0; i < n; ++i) dst[i] = da[i] * db[i];
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = Tensor::uninit(a.shape());
  const double* da = a.data().data();
  double* dst = out.mutable_data().data();
  const int64_t n = out.size();
#pragma omp parallel for schedule(static) if (n > 65536)
  for (int64_t i = 0; i < n; ++i) dst[i] = c * da[i];
  return out;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const int64_t r = a.extent(0);
  const int64_t c = a.extent(1);
  Tensor out = Tensor::uninit({c, r});
  const auto da = a.data();
  auto dst = out.mutable_data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) dst[static_cast<size_t>(j * r + i)] = da[static_cast<size_t>(i * c + j)];
  return out;
}

double sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return acc;
}

double norm2(const Tensor& a) { return std::sqrt(dot(a, a)); }

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

} // namespace sqgn
