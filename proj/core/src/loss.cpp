#include "sqgn/loss.hpp"

#include <algorithm>
#include <cmath>

#include "sqgn/errors.hpp"

namespace sqgn::loss {

namespace {

void expect_rank2(const Tensor& h) {
  if (h.rank() != 2) throw DimensionError("loss: h must be (N,r), got " + shape_str(h.shape()));
}

int64_t class_index(const Tensor& y, int64_t i, int64_t r) {
  const double raw = y[i];
  const int64_t idx = static_cast<int64_t>(std::llround(raw));
  if (std::abs(raw - static_cast<double>(idx)) > 1e-9 || idx < 0 || idx >= r)
    throw ContractError("loss: label index " + std::to_string(raw) + " out of range [0," +
                        std::to_string(r) + ")");
  return idx;
}

void check_labels(Kind kind, const Tensor& h, const Tensor& y) {
  expect_rank2(h);
  if (kind == Kind::mean_square_error) {
    if (!same_shape(h.shape(), y.shape()))
      throw DimensionError("mse: h " + shape_str(h.shape()) + " vs y " + shape_str(y.shape()));
  } else {
    if (y.rank() != 1 || y.extent(0) != h.extent(0))
      throw DimensionError("cross_entropy: labels must be (N) indices, got " +
                           shape_str(y.shape()));
  }
}

Tensor row_max(const Tensor& h) {
  const int64_t n = h.extent(0), r = h.extent(1);
  Tensor out = Tensor::uninit({n});
  const double* src = h.data().data();
  double* dst = out.mutable_data().data();
  for (int64_t i = 0; i < n; ++i) {
    double m = src[i * r];
    for (int64_t j = 1; j < r; ++j) m = std::max(m, src[i * r + j]);
    dst[i] = m;
  }
  return out;
}

} // namespace

Kind kind_from_string(const std::string& s) {
  if (s == "mse" || s == "mean_square_error") return Kind::mean_square_error;
  if (s == "cross_entropy" || s == "softmax_cross_entropy") return Kind::softmax_cross_entropy;
  throw ContractError("unknown loss kind '" + s + "'");
}

const char* kind_name(Kind k) {
  return k == Kind::mean_square_error ? "mean_square_error" : "softmax_cross_entropy";
}

double loss_value(Kind kind, const Tensor& h, const Tensor& y) {
  check_labels(kind, h, y);
  const int64_t n = h.extent(0), r = h.extent(1);
  const double* hv = h.data().data();
  double acc = 0.0;
  if (kind == Kind::mean_square_error) {
    const double* yv = y.data().data();
    for (int64_t i = 0; i < n * r; ++i) {
      const double d = hv[i] - yv[i];
      acc += d * d;
    }
  } else {
    for (int64_t i = 0; i < n; ++i) {
      const int64_t cls = class_index(y, i, r);
      double m = hv[i * r];
      for (int64_t j = 1; j < r; ++j) m = std::max(m, hv[i * r + j]);
      double se = 0.0;
      for (int64_t j = 0; j < r; ++j) se += std::exp(hv[i * r + j] - m);
      acc += m + std::log(se) - hv[i * r + cls];
    }
  }
  const double value = acc / static_cast<double>(n);
  if (!std::isfinite(value)) throw NumericError("loss_value: non-finite result");
  return value;
}

ad::Var loss_graph(Kind kind, ad::Var h, const Tensor& y) {
  check_labels(kind, h.value(), y);
  ad::Tape& tape = *h.tape;
  const int64_t n = h.value().extent(0), r = h.value().extent(1);
  if (kind == Kind::mean_square_error) {
    ad::Var d = ad::sub(h, tape.leaf(y, false));
    return ad::scale(ad::sum(ad::mul(d, d)), 1.0 / static_cast<double>(n));
  }
  // log-sum-exp with a constant per-row shift (valid a.e.; the shift is
  // piecewise constant in h)
  ad::Var mx = tape.leaf(row_max(h.value()), false);
  ad::Var shifted = ad::sub(h, ad::rep_cols(mx, r));
  ad::Var lse = ad::add(ad::log(ad::row_sum(ad::exp(shifted))), mx);
  auto pick = std::make_shared<ad::IndexMap>(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) (*pick)[static_cast<size_t>(i)] = i * r + class_index(y, i, r);
  ad::Var picked = ad::gather(h, std::move(pick), {n});
  return ad::scale(ad::sum(ad::sub(lse, picked)), 1.0 / static_cast<double>(n));
}

Tensor gradient_h(Kind kind, const Tensor& h, const Tensor& y) {
  ad::Tape tape;
  ad::Var hv = tape.leaf(h, true);
  return ad::backward(loss_graph(kind, hv, y), hv).value();
}

Tensor output_hessian_vp(Kind kind, const Tensor& h, const Tensor& y, const Tensor& z) {
  check_labels(kind, h, y);
  if (!same_shape(h.shape(), z.shape()))
    throw DimensionError("output_hessian_vp: z " + shape_str(z.shape()) + " vs h " +
                         shape_str(h.shape()));
  const int64_t n = h.extent(0), r = h.extent(1);
  if (kind == Kind::mean_square_error) return scale(z, 2.0 / static_cast<double>(n));

  Tensor out = Tensor::uninit(h.shape());
  const double* hv = h.data().data();
  const double* zv = z.data().data();
  double* dst = out.mutable_data().data();
  std::vector<double> p(static_cast<size_t>(r));
  for (int64_t i = 0; i < n; ++i) {
    double m = hv[i * r];
    for (int64_t j = 1; j < r; ++j) m = std::max(m, hv[i * r + j]);
    double se = 0.0;
    for (int64_t j = 0; j < r; ++j) {
      p[static_cast<size_t>(j)] = std::exp(hv[i * r + j] - m);
      se += p[static_cast<size_t>(j)];
    }
    double pz = 0.0;
    for (int64_t j = 0; j < r; ++j) {
      p[static_cast<size_t>(j)] /= se;
      pz += p[static_cast<size_t>(j)] * zv[i * r + j];
    }
    for (int64_t j = 0; j < r; ++j)
      dst[i * r + j] = p[static_cast<size_t>(j)] * (zv[i * r + j] - pz) / static_cast<double>(n);
  }
  return out;
}

Tensor output_hessian_vp_literal(Kind kind, const Tensor& h, const Tensor& y, const Tensor& z) {
  if (!same_shape(h.shape(), z.shape()))
    throw DimensionError("output_hessian_vp_literal: z " + shape_str(z.shape()) + " vs h " +
                         shape_str(h.shape()));
  ad::Tape tape;
  ad::Var hv = tape.leaf(h, true);
  ad::Var grad = ad::backward(loss_graph(kind, hv, y), hv);
  ad::Var t = ad::sum(ad::mul(grad, tape.leaf(z, false)));
  return ad::backward(t, hv).value();
}

} // namespace sqgn::loss
