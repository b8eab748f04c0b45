#include "sqgn/autodiff.hpp"

#include <cmath>
#include <cstring>

namespace sqgn::ad {

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::neg: return "neg";
    case Op::scale: return "scale";
    case Op::matmul: return "matmul";
    case Op::matmul_tn: return "matmul_tn";
    case Op::matmul_nt: return "matmul_nt";
    case Op::transpose2d: return "transpose";
    case Op::reshape: return "reshape";
    case Op::slice: return "slice";
    case Op::pad_to: return "pad_to";
    case Op::conv2d: return "conv2d";
    case Op::conv_x_grad: return "conv_x_grad";
    case Op::conv_k_grad: return "conv_k_grad";
    case Op::bias_nhwc: return "bias_nhwc";
    case Op::channel_sum: return "channel_sum";
    case Op::rep_channels: return "rep_channels";
    case Op::gather: return "gather";
    case Op::scatter_add: return "scatter_add";
    case Op::sum_all: return "sum";
    case Op::expand_scalar: return "expand_scalar";
    case Op::row_sum: return "row_sum";
    case Op::col_sum: return "col_sum";
    case Op::rep_rows: return "rep_rows";
    case Op::rep_cols: return "rep_cols";
    case Op::relu: return "relu";
    case Op::relu_grad: return "relu_grad";
    case Op::exp_op: return "exp";
    case Op::log_op: return "log";
    case Op::reciprocal: return "reciprocal";
  }
  return "?";
}

const Tensor& Var::value() const { return tape->node(*this).value; }
const Shape& Var::shape() const { return value().shape(); }

void Tape::check(const Var& v) const {
  if (v.tape != this || v.idx < 0 || v.idx >= static_cast<int32_t>(nodes_.size()))
    throw TapeError("Var does not belong to this tape");
  if (v.gen != gen_)
    throw TapeError("nondifferentiable tape: generation " + std::to_string(v.gen) +
                    " was cleared and its intermediates discarded");
}

Node& Tape::node(const Var& v) {
  check(v);
  return nodes_[static_cast<size_t>(v.idx)];
}

const Node& Tape::node(const Var& v) const {
  check(v);
  return nodes_[static_cast<size_t>(v.idx)];
}

Var Tape::emit(Node n) {
  nodes_.push_back(std::move(n));
  return Var{this, gen_, static_cast<int32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.op = Op::leaf;
  n.requires_grad = requires_grad;
  return emit(std::move(n));
}

void Tape::clear() {
  nodes_.clear();
  nodes_.shrink_to_fit();
  ++gen_;
}

namespace {

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw TapeError("Var is default-constructed");
  return *a.tape;
}

Tape& same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw TapeError("operands live on different tapes");
  return tape_of(a);
}

Var unary(Tape& tape, Op op, Var a, Tensor value) {
  const Node& pa = tape.node(a);
  Node n;
  n.value = std::move(value);
  n.op = op;
  n.a = a.idx;
  n.requires_grad = pa.requires_grad;
  return tape.emit(std::move(n));
}

Var binary(Tape& tape, Op op, Var a, Var b, Tensor value) {
  Node n;
  n.value = std::move(value);
  n.op = op;
  n.a = a.idx;
  n.b = b.idx;
  n.requires_grad = tape.node(a).requires_grad || tape.node(b).requires_grad;
  return tape.emit(std::move(n));
}

void expect_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}

struct ConvDims {
  int64_t n, h, w, ci, kh, kw, co, oh, ow;
};

ConvDims conv_dims(const Shape& image, const Shape& kernel, const char* op) {
  if (image.size() != 4)
    throw DimensionError(std::string(op) + ": expected (N,H,W,C) input, got " + shape_str(image));
  if (kernel.size() != 4)
    throw DimensionError(std::string(op) + ": expected (KH,KW,Ci,Co) kernel, got " +
                         shape_str(kernel));
  ConvDims d{image[0], image[1], image[2], image[3],
             kernel[0], kernel[1], kernel[3], 0, 0};
  if (kernel[2] != d.ci)
    throw DimensionError(std::string(op) + ": kernel channels " + shape_str(kernel) +
                         " do not match input " + shape_str(image));
  if (d.kh <= 0 || d.kw <= 0 || d.kh > d.h || d.kw > d.w)
    throw DimensionError(std::string(op) + ": kernel " + shape_str(kernel) +
                         " does not fit input " + shape_str(image));
  d.oh = d.h - d.kh + 1;
  d.ow = d.w - d.kw + 1;
  return d;
}

template <int CO>
Tensor conv2d_value_t(const Tensor& x, const Tensor& k, const ConvDims& d) {
  Tensor out = Tensor::uninit({d.n, d.oh, d.ow, d.co});
  const double* xv = x.data().data();
  const double* kv = k.data().data();
  double* dst = out.mutable_data().data();
  const int64_t co_n = CO > 0 ? CO : d.co;
#pragma omp parallel for schedule(static) if (d.n > 32)
  for (int64_t n = 0; n < d.n; ++n) {
    double acc[64];
    for (int64_t oy = 0; oy < d.oh; ++oy)
      for (int64_t ox = 0; ox < d.ow; ++ox) {
        for (int64_t co = 0; co < co_n; ++co) acc[co] = 0.0;
        for (int64_t dy = 0; dy < d.kh; ++dy) {
          const double* xrow = xv + ((n * d.h + oy + dy) * d.w + ox) * d.ci;
          const double* krow = kv + dy * d.kw * d.ci * co_n;
          for (int64_t i = 0; i < d.kw * d.ci; ++i) {
            const double xval = xrow[i];
            const double* kk = krow + i * co_n;
            for (int64_t co = 0; co < co_n; ++co) acc[co] += xval * kk[co];
          }
        }
        double* o = dst + ((n * d.oh + oy) * d.ow + ox) * co_n;
        for (int64_t co = 0; co < co_n; ++co) o[co] = acc[co];
      }
  }
  return out;
}

template <int CO>
Tensor conv_x_grad_value_t(const Tensor& g, const Tensor& k, const ConvDims& d) {
  Tensor out = Tensor::uninit({d.n, d.h, d.w, d.ci});
  double* dst = out.mutable_data().data();
  const double* gv = g.data().data();
  const double* kv = k.data().data();
  const int64_t image = d.h * d.w * d.ci;
  const int64_t co_n = CO > 0 ? CO : d.co;
#pragma omp parallel for schedule(static) if (d.n > 32)
  for (int64_t n = 0; n < d.n; ++n) {
    double* img = dst + n * image;
    for (int64_t i = 0; i < image; ++i) img[i] = 0.0;
    for (int64_t oy = 0; oy < d.oh; ++oy)
      for (int64_t ox = 0; ox < d.ow; ++ox) {
        const double* go = gv + ((n * d.oh + oy) * d.ow + ox) * co_n;
        for (int64_t dy = 0; dy < d.kh; ++dy) {
          double* xrow = dst + ((n * d.h + oy + dy) * d.w + ox) * d.ci;
          const double* krow = kv + dy * d.kw * d.ci * co_n;
          for (int64_t i = 0; i < d.kw * d.ci; ++i) {
            const double* kk = krow + i * co_n;
            double acc = 0.0;
            for (int64_t co = 0; co < co_n; ++co) acc += go[co] * kk[co];
            xrow[i] += acc;
          }
        }
      }
  }
  return out;
}

template <int CO>
Tensor conv_k_grad_value_t(const Tensor& x, const Tensor& g, const ConvDims& d) {
  Tensor out = Tensor::zeros({d.kh, d.kw, d.ci, d.co});
  double* dst = out.mutable_data().data();
  const double* xv = x.data().data();
  const double* gv = g.data().data();
  const int64_t co_n = CO > 0 ? CO : d.co;
  for (int64_t n = 0; n < d.n; ++n)
    for (int64_t oy = 0; oy < d.oh; ++oy)
      for (int64_t ox = 0; ox < d.ow; ++ox) {
        const double* go = gv + ((n * d.oh + oy) * d.ow + ox) * co_n;
        for (int64_t dy = 0; dy < d.kh; ++dy) {
          const double* xrow = xv + ((n * d.h + oy + dy) * d.w + ox) * d.ci;
          double* krow = dst + dy * d.kw * d.ci * co_n;
          for (int64_t i = 0; i < d.kw * d.ci; ++i) {
            const double xval = xrow[i];
            double* kk = krow + i * co_n;
            for (int64_t co = 0; co < co_n; ++co) kk[co] += xval * go[co];
          }
        }
      }
  return out;
}

// dispatch on the common small channel counts so the inner loops unroll
template <typename F2, typename F4, typename F8, typename F12, typename F0>
Tensor co_dispatch(int64_t co, F2 f2, F4 f4, F8 f8, F12 f12, F0 f0) {
  switch (co) {
    case 2: return f2();
    case 4: return f4();
    case 8: return f8();
    case 12: return f12();
    default: return f0();
  }
}

Tensor conv2d_value(const Tensor& x, const Tensor& k, const ConvDims& d) {
  if (d.co > 64) throw DimensionError("conv2d: more than 64 output channels");
  return co_dispatch(
      d.co, [&] { return conv2d_value_t<2>(x, k, d); }, [&] { return conv2d_value_t<4>(x, k, d); },
      [&] { return conv2d_value_t<8>(x, k, d); }, [&] { return conv2d_value_t<12>(x, k, d); },
      [&] { return conv2d_value_t<0>(x, k, d); });
}

Tensor conv_x_grad_value(const Tensor& g, const Tensor& k, const ConvDims& d) {
  return co_dispatch(
      d.co, [&] { return conv_x_grad_value_t<2>(g, k, d); },
      [&] { return conv_x_grad_value_t<4>(g, k, d); },
      [&] { return conv_x_grad_value_t<8>(g, k, d); },
      [&] { return conv_x_grad_value_t<12>(g, k, d); },
      [&] { return conv_x_grad_value_t<0>(g, k, d); });
}

Tensor conv_k_grad_value(const Tensor& x, const Tensor& g, const ConvDims& d) {
  return co_dispatch(
      d.co, [&] { return conv_k_grad_value_t<2>(x, g, d); },
      [&] { return conv_k_grad_value_t<4>(x, g, d); },
      [&] { return conv_k_grad_value_t<8>(x, g, d); },
      [&] { return conv_k_grad_value_t<12>(x, g, d); },
      [&] { return conv_k_grad_value_t<0>(x, g, d); });
}

} // namespace

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  return binary(t, Op::add, a, b, sqgn::add(a.value(), b.value()));
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  return binary(t, Op::sub, a, b, sqgn::sub(a.value(), b.value()));
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  return binary(t, Op::mul, a, b, sqgn::mul(a.value(), b.value()));
}

Var neg(Var a) { return unary(tape_of(a), Op::neg, a, sqgn::neg(a.value())); }

Var scale(Var a, double c) {
  Var v = unary(tape_of(a), Op::scale, a, sqgn::scale(a.value(), c));
  a.tape->node(v).scalar = c;
  return v;
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  return binary(t, Op::matmul, a, b, sqgn::gemm(a.value(), b.value()));
}

Var matmul_tn(Var a, Var b) {
  Tape& t = same_tape(a, b);
  return binary(t, Op::matmul_tn, a, b, sqgn::gemm_tn(a.value(), b.value()));
}

Var matmul_nt(Var a, Var b) {
  Tape& t = same_tape(a, b);
  return binary(t, Op::matmul_nt, a, b, sqgn::gemm_nt(a.value(), b.value()));
}

Var transpose(Var a) { return unary(tape_of(a), Op::transpose2d, a, sqgn::transpose(a.value())); }

Var reshape(Var a, Shape shape) {
  return unary(tape_of(a), Op::reshape, a, a.value().reshaped(std::move(shape)));
}

Var slice(Var a, int64_t offset, int64_t len) {
  const Tensor& x = a.value();
  if (offset < 0 || len < 0 || offset + len > x.size())
    throw DimensionError("slice: range [" + std::to_string(offset) + "," +
                         std::to_string(offset + len) + ") exceeds " + std::to_string(x.size()) +
                         " elements");
  Tensor out = Tensor::uninit({len});
  std::memcpy(out.mutable_data().data(), x.data().data() + offset,
              static_cast<size_t>(len) * sizeof(double));
  Var v = unary(tape_of(a), Op::slice, a, std::move(out));
  a.tape->node(v).i0 = static_cast<int32_t>(offset);
  return v;
}

Var pad_to(Var a, int64_t offset, int64_t total) {
  const Tensor& x = a.value();
  if (offset < 0 || offset + x.size() > total)
    throw DimensionError("pad_to: " + std::to_string(x.size()) + " elements at offset " +
                         std::to_string(offset) + " exceed total " + std::to_string(total));
  Tensor out = Tensor::zeros({total});
  std::memcpy(out.mutable_data().data() + offset, x.data().data(),
              static_cast<size_t>(x.size()) * sizeof(double));
  Var v = unary(tape_of(a), Op::pad_to, a, std::move(out));
  a.tape->node(v).i0 = static_cast<int32_t>(offset);
  return v;
}

Var conv2d(Var x, Var kernel) {
  Tape& t = same_tape(x, kernel);
  const ConvDims d = conv_dims(x.shape(), kernel.shape(), "conv2d");
  return binary(t, Op::conv2d, x, kernel, conv2d_value(x.value(), kernel.value(), d));
}

Var conv_x_grad(Var g, Var kernel, Shape image_shape) {
  Tape& t = same_tape(g, kernel);
  const ConvDims d = conv_dims(image_shape, kernel.shape(), "conv_x_grad");
  const Shape& gs = g.shape();
  if (gs.size() != 4 || gs[0] != d.n || gs[1] != d.oh || gs[2] != d.ow || gs[3] != d.co)
    throw DimensionError("conv_x_grad: adjoint shape " + shape_str(gs) +
                         " inconsistent with image " + shape_str(image_shape));
  Var v = binary(t, Op::conv_x_grad, g, kernel, conv_x_grad_value(g.value(), kernel.value(), d));
  t.node(v).aux_shape = std::move(image_shape);
  return v;
}

Var conv_k_grad(Var x, Var g, Shape kernel_shape) {
  Tape& t = same_tape(x, g);
  const ConvDims d = conv_dims(x.shape(), kernel_shape, "conv_k_grad");
  const Shape& gs = g.shape();
  if (gs.size() != 4 || gs[0] != d.n || gs[1] != d.oh || gs[2] != d.ow || gs[3] != d.co)
    throw DimensionError("conv_k_grad: adjoint shape " + shape_str(gs) +
                         " inconsistent with kernel " + shape_str(kernel_shape));
  Var v = binary(t, Op::conv_k_grad, x, g, conv_k_grad_value(x.value(), g.value(), d));
  t.node(v).aux_shape = std::move(kernel_shape);
  return v;
}

Var bias_nhwc(Var x, Var bias) {
  Tape& t = same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (xv.rank() < 2 || bv.rank() != 1 || xv.extent(xv.rank() - 1) != bv.extent(0))
    throw DimensionError("bias_nhwc: bias " + shape_str(bv.shape()) +
                         " does not match trailing channels of " + shape_str(xv.shape()));
  const int64_t c = bv.extent(0);
  const int64_t n = xv.size();
  Tensor out = Tensor::uninit(xv.shape());
  const double* xs = xv.data().data();
  const double* bs = bv.data().data();
  double* dst = out.mutable_data().data();
#pragma omp parallel for schedule(static) if (n > 65536)
  for (int64_t i = 0; i < n; ++i) dst[i] = xs[i] + bs[i % c];
  return binary(t, Op::bias_nhwc, x, bias, std::move(out));
}

Var channel_sum(Var a) {
  const Tensor& x = a.value();
  if (x.rank() < 2) throw DimensionError("channel_sum: expected rank >= 2");
  const int64_t c = x.extent(x.rank() - 1);
  Tensor out = Tensor::zeros({c});
  const double* xs = x.data().data();
  double* dst = out.mutable_data().data();
  const int64_t rows = x.size() / c;
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < c; ++j) dst[j] += xs[i * c + j];
  return unary(tape_of(a), Op::channel_sum, a, std::move(out));
}

Var rep_channels(Var a, Shape shape) {
  const Tensor& x = a.value();
  if (x.rank() != 1) throw DimensionError("rep_channels: expected rank-1 input");
  const int64_t c = x.extent(0);
  if (shape.empty() || shape.back() != c)
    throw DimensionError("rep_channels: target " + shape_str(shape) +
                         " does not end in " + std::to_string(c) + " channels");
  Tensor out = Tensor::uninit(shape);
  const double* xs = x.data().data();
  double* dst = out.mutable_data().data();
  const int64_t n = out.size();
#pragma omp parallel for schedule(static) if (n > 65536)
  for (int64_t i = 0; i < n; ++i) dst[i] = xs[i % c];
  return unary(tape_of(a), Op::rep_channels, a, std::move(out));
}

Var gather(Var a, std::shared_ptr<const IndexMap> map, Shape out_shape) {
  const Tensor& x = a.value();
  if (!map || static_cast<int64_t>(map->size()) != shape_numel(out_shape))
    throw DimensionError("gather: index map size does not match output shape " +
                         shape_str(out_shape));
  Tensor out = Tensor::uninit(out_shape);
  const double* src = x.data().data();
  double* dst = out.mutable_data().data();
  const int64_t in_size = x.size();
  const IndexMap& m = *map;
  const int64_t count = static_cast<int64_t>(m.size());
  bool ok = true;
#pragma omp parallel for schedule(static) reduction(&& : ok) if (count > 65536)
  for (int64_t i = 0; i < count; ++i) {
    const int64_t idx = m[static_cast<size_t>(i)];
    const bool valid = idx >= 0 && idx < in_size;
    dst[i] = valid ? src[idx] : 0.0;
    ok = ok && valid;
  }
  if (!ok) throw DimensionError("gather: index out of range");
  Var v = unary(tape_of(a), Op::gather, a, std::move(out));
  a.tape->node(v).map = std::move(map);
  return v;
}

Var scatter_add(Var a, std::shared_ptr<const IndexMap> map, Shape out_shape) {
  const Tensor& x = a.value();
  if (!map || static_cast<int64_t>(map->size()) != x.size())
    throw DimensionError("scatter_add: index map size does not match input size");
  Tensor out = Tensor::zeros(out_shape);
  const double* src = x.data().data();
  double* dst = out.mutable_data().data();
  const int64_t out_size = out.size();
  const IndexMap& m = *map;
  for (size_t i = 0; i < m.size(); ++i) {
    if (m[i] < 0 || m[i] >= out_size) throw DimensionError("scatter_add: index out of range");
    dst[m[i]] += src[i];
  }
  Var v = unary(tape_of(a), Op::scatter_add, a, std::move(out));
  Node& n = a.tape->node(v);
  n.map = std::move(map);
  n.aux_shape = std::move(out_shape);
  return v;
}

Var sum(Var a) {
  return unary(tape_of(a), Op::sum_all, a, Tensor::scalar(sqgn::sum(a.value())));
}

Var expand_scalar(Var a, Shape shape) {
  const Tensor& x = a.value();
  if (x.size() != 1) throw DimensionError("expand_scalar: input must be a single element");
  return unary(tape_of(a), Op::expand_scalar, a, Tensor::full(std::move(shape), x[0]));
}

Var row_sum(Var a) {
  const Tensor& x = a.value();
  expect_rank2(x, "row_sum");
  const int64_t r = x.extent(0), c = x.extent(1);
  Tensor out = Tensor::uninit({r});
  const double* src = x.data().data();
  double* dst = out.mutable_data().data();
  for (int64_t i = 0; i < r; ++i) {
    double acc = 0.0;
    for (int64_t j = 0; j < c; ++j) acc += src[i * c + j];
    dst[i] = acc;
  }
  return unary(tape_of(a), Op::row_sum, a, std::move(out));
}

Var col_sum(Var a) {
  const Tensor& x = a.value();
  expect_rank2(x, "col_sum");
  const int64_t r = x.extent(0), c = x.extent(1);
  Tensor out = Tensor::zeros({c});
  const double* src = x.data().data();
  double* dst = out.mutable_data().data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) dst[j] += src[i * c + j];
  return unary(tape_of(a), Op::col_sum, a, std::move(out));
}

Var rep_rows(Var a, int64_t rows) {
  const Tensor& x = a.value();
  if (x.rank() != 1) throw DimensionError("rep_rows: expected rank-1 input");
  const int64_t c = x.extent(0);
  Tensor out = Tensor::uninit({rows, c});
  const double* src = x.data().data();
  double* dst = out.mutable_data().data();
#pragma omp parallel for schedule(static) if (rows * c > 65536)
  for (int64_t i = 0; i < rows; ++i)
    std::memcpy(dst + i * c, src, static_cast<size_t>(c) * sizeof(double));
  Var v = unary(tape_of(a), Op::rep_rows, a, std::move(out));
  a.tape->node(v).i0 = static_cast<int32_t>(rows);
  return v;
}

Var rep_cols(Var a, int64_t cols) {
  const Tensor& x = a.value();
  if (x.rank() != 1) throw DimensionError("rep_cols: expected rank-1 input");
  const int64_t r = x.extent(0);
  Tensor out = Tensor::uninit({r, cols});
  const double* src = x.data().data();
  double* dst = out.mutable_data().data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < cols; ++j) dst[i * cols + j] = src[i];
  Var v = unary(tape_of(a), Op::rep_cols, a, std::move(out));
  a.tape->node(v).i0 = static_cast<int32_t>(cols);
  return v;
}

Var relu(Var a) {
  const Tensor& x = a.value();
  Tensor out = Tensor::uninit(x.shape());
  const double* src = x.data().data();
  double* dst = out.mutable_data().data();
  const int64_t n = x.size();
#pragma omp parallel for schedule(static) if (n > 65536)
  for (int64_t i = 0; i < n; ++i) dst[i] = src[i] > 0.0 ? src[i] : 0.0;
  return unary(tape_of(a), Op::relu, a, std::move(out));
}

Var relu_grad(Var g, Var x) {
  Tape& t = same_tape(g, x);
  const Tensor& gv = g.value();
  const Tensor& xv = x.value();
  if (!same_shape(gv.shape(), xv.shape()))
    throw DimensionError("relu_grad: shape mismatch " + shape_str(gv.shape()) + " vs " +
                         shape_str(xv.shape()));
  Tensor out = Tensor::uninit(gv.shape());
  const double* gs = gv.data().data();
  const double* xs = xv.data().data();
  double* dst = out.mutable_data().data();
  const int64_t n = gv.size();
#pragma omp parallel for schedule(static) if (n > 65536)
  for (int64_t i = 0; i < n; ++i) dst[i] = xs[i] > 0.0 ? gs[i] : 0.0;
  return binary(t, Op::relu_grad, g, x, std::move(out));
}

Var exp(Var a) {
  const Tensor& x = a.value();
  Tensor out = Tensor::uninit(x.shape());
  const double* src = x.data().data();
  double* dst = out.mutable_data().data();
  for (int64_t i = 0; i < x.size(); ++i) dst[i] = std::exp(src[i]);
  return unary(tape_of(a), Op::exp_op, a, std::move(out));
}

Var log(Var a) {
  const Tensor& x = a.value();
  Tensor out = Tensor::uninit(x.shape());
  const double* src = x.data().data();
  double* dst = out.mutable_data().data();
  for (int64_t i = 0; i < x.size(); ++i) dst[i] = std::log(src[i]);
  return unary(tape_of(a), Op::log_op, a, std::move(out));
}

Var reciprocal(Var a) {
  const Tensor& x = a.value();
  Tensor out = Tensor::uninit(x.shape());
  const double* src = x.data().data();
  double* dst = out.mutable_data().data();
  for (int64_t i = 0; i < x.size(); ++i) dst[i] = 1.0 / src[i];
  return unary(tape_of(a), Op::reciprocal, a, std::move(out));
}

Var dot(Var a, Var b) {
  if (a.value().size() != b.value().size())
    throw DimensionError("dot: element counts differ");
  Var af = a.value().rank() == 1 ? a : reshape(a, {a.value().size()});
  Var bf = b.value().rank() == 1 ? b : reshape(b, {b.value().size()});
  return sum(mul(af, bf));
}

namespace {

// Fields of a node needed by the adjoint rules, copied out before any emit()
// can reallocate the node vector.
struct NodeView {
  Op op;
  int32_t a, b;
  int32_t i0, i1;
  double scalar;
  Shape a_shape, b_shape;
  Shape aux_shape;
  std::shared_ptr<const IndexMap> map;
};

} // namespace

std::vector<Var> backward(Var output, std::span<const Var> inputs) {
  Tape& tape = tape_of(output);
  const uint64_t gen = tape.generation();
  {
    const Node& out_node = tape.node(output);
    if (out_node.value.size() != 1)
      throw ContractError("backward: output must be scalar, got shape " +
                          shape_str(out_node.value.shape()));
    if (!std::isfinite(out_node.value[0])) {
      for (int32_t i = 0; i <= output.idx; ++i) {
        const Node& n = tape.node(Var{&tape, gen, i});
        if (!n.value.all_finite())
          throw NumericError(std::string("non-finite value produced by op '") + op_name(n.op) +
                             "' during forward pass");
      }
      throw NumericError("non-finite scalar output");
    }
  }
  for (const Var& in : inputs) tape.node(in); // validate generation

  auto at = [&](int32_t idx) { return Var{&tape, gen, idx}; };

  const int32_t out_idx = output.idx;
  // toward[i]: node i depends on at least one requested input. Adjoints are
  // only propagated through such nodes; everything else is dead weight for
  // this pass (it cannot contribute to the requested gradients).
  std::vector<char> toward(static_cast<size_t>(out_idx) + 1, 0);
  for (const Var& in : inputs)
    if (in.idx <= out_idx) toward[static_cast<size_t>(in.idx)] = 1;
  for (int32_t i = 0; i <= out_idx; ++i) {
    if (toward[static_cast<size_t>(i)]) continue;
    const Node& n = tape.node(at(i));
    if ((n.a >= 0 && toward[static_cast<size_t>(n.a)]) ||
        (n.b >= 0 && toward[static_cast<size_t>(n.b)]))
      toward[static_cast<size_t>(i)] = 1;
  }

  // adj[i]: node index of the accumulated adjoint of node i, or -1.
  std::vector<int32_t> adj(static_cast<size_t>(out_idx) + 1, -1);
  adj[static_cast<size_t>(out_idx)] =
      tape.leaf(Tensor::full(output.value().shape(), 1.0), false).idx;

  for (int32_t i = out_idx; i >= 0; --i) {
    if (adj[static_cast<size_t>(i)] < 0 || !toward[static_cast<size_t>(i)]) continue;
    NodeView n;
    {
      const Node& src = tape.node(at(i));
      if (src.op == Op::leaf || !src.requires_grad) continue;
      n.op = src.op;
      n.a = src.a;
      n.b = src.b;
      n.i0 = src.i0;
      n.i1 = src.i1;
      n.scalar = src.scalar;
      n.aux_shape = src.aux_shape;
      n.map = src.map;
      if (n.a >= 0) n.a_shape = tape.node(at(n.a)).value.shape();
      if (n.b >= 0) n.b_shape = tape.node(at(n.b)).value.shape();
    }
    const Var g = at(adj[static_cast<size_t>(i)]);

    auto wants = [&](int32_t parent) {
      return parent >= 0 && toward[static_cast<size_t>(parent)] &&
             tape.node(at(parent)).requires_grad;
    };
    auto accum = [&](int32_t parent, Var contrib) {
      int32_t& slot = adj[static_cast<size_t>(parent)];
      slot = slot < 0 ? contrib.idx : add(at(slot), contrib).idx;
    };

    switch (n.op) {
      case Op::leaf:
        break;
      case Op::add:
        if (wants(n.a)) accum(n.a, g);
        if (wants(n.b)) accum(n.b, g);
        break;
      case Op::sub:
        if (wants(n.a)) accum(n.a, g);
        if (wants(n.b)) accum(n.b, neg(g));
        break;
      case Op::mul:
        if (wants(n.a)) accum(n.a, mul(g, at(n.b)));
        if (wants(n.b)) accum(n.b, mul(g, at(n.a)));
        break;
      case Op::neg:
        if (wants(n.a)) accum(n.a, neg(g));
        break;
      case Op::scale:
        if (wants(n.a)) accum(n.a, scale(g, n.scalar));
        break;
      case Op::matmul:
        if (wants(n.a)) accum(n.a, matmul_nt(g, at(n.b)));
        if (wants(n.b)) accum(n.b, matmul_tn(at(n.a), g));
        break;
      case Op::matmul_tn: // value = a^T b
        if (wants(n.a)) accum(n.a, matmul_nt(at(n.b), g));
        if (wants(n.b)) accum(n.b, matmul(at(n.a), g));
        break;
      case Op::matmul_nt: // value = a b^T
        if (wants(n.a)) accum(n.a, matmul(g, at(n.b)));
        if (wants(n.b)) accum(n.b, matmul_tn(g, at(n.a)));
        break;
      case Op::transpose2d:
        if (wants(n.a)) accum(n.a, transpose(g));
        break;
      case Op::reshape:
        if (wants(n.a)) accum(n.a, reshape(g, n.a_shape));
        break;
      case Op::slice:
        if (wants(n.a)) accum(n.a, reshape(pad_to(g, n.i0, shape_numel(n.a_shape)), n.a_shape));
        break;
      case Op::pad_to:
        if (wants(n.a)) accum(n.a, reshape(slice(g, n.i0, shape_numel(n.a_shape)), n.a_shape));
        break;
      case Op::conv2d: // value = conv(x=a, k=b)
        if (wants(n.a)) accum(n.a, conv_x_grad(g, at(n.b), n.a_shape));
        if (wants(n.b)) accum(n.b, conv_k_grad(at(n.a), g, n.b_shape));
        break;
      case Op::conv_x_grad: // value = L_k^T g0, with a=g0, b=k
        if (wants(n.a)) accum(n.a, conv2d(g, at(n.b)));
        if (wants(n.b)) accum(n.b, conv_k_grad(g, at(n.a), n.b_shape));
        break;
      case Op::conv_k_grad: // value = dk(x=a, g0=b)
        if (wants(n.a)) accum(n.a, conv_x_grad(at(n.b), g, n.a_shape));
        if (wants(n.b)) accum(n.b, conv2d(at(n.a), g));
        break;
      case Op::bias_nhwc:
        if (wants(n.a)) accum(n.a, g);
        if (wants(n.b)) accum(n.b, channel_sum(g));
        break;
      case Op::channel_sum:
        if (wants(n.a)) accum(n.a, rep_channels(g, n.a_shape));
        break;
      case Op::rep_channels:
        if (wants(n.a)) accum(n.a, channel_sum(g));
        break;
      case Op::gather:
        if (wants(n.a)) accum(n.a, reshape(scatter_add(g, n.map, {shape_numel(n.a_shape)}), n.a_shape));
        break;
      case Op::scatter_add:
        if (wants(n.a)) accum(n.a, reshape(gather(g, n.map, {shape_numel(n.a_shape)}), n.a_shape));
        break;
      case Op::sum_all:
        if (wants(n.a)) accum(n.a, expand_scalar(g, n.a_shape));
        break;
      case Op::expand_scalar:
        if (wants(n.a)) accum(n.a, reshape(sum(g), n.a_shape));
        break;
      case Op::row_sum:
        if (wants(n.a)) accum(n.a, rep_cols(g, n.a_shape[1]));
        break;
      case Op::col_sum:
        if (wants(n.a)) accum(n.a, rep_rows(g, n.a_shape[0]));
        break;
      case Op::rep_rows:
        if (wants(n.a)) accum(n.a, col_sum(g));
        break;
      case Op::rep_cols:
        if (wants(n.a)) accum(n.a, row_sum(g));
        break;
      case Op::relu:
        if (wants(n.a)) accum(n.a, relu_grad(g, at(n.a)));
        break;
      case Op::relu_grad: // value = g0 * 1[x > 0]; x contributes nothing
        if (wants(n.a)) accum(n.a, relu_grad(g, at(n.b)));
        break;
      case Op::exp_op:
        if (wants(n.a)) accum(n.a, mul(g, at(i)));
        break;
      case Op::log_op:
        if (wants(n.a)) accum(n.a, mul(g, reciprocal(at(n.a))));
        break;
      case Op::reciprocal:
        if (wants(n.a)) accum(n.a, neg(mul(g, mul(at(i), at(i)))));
        break;
    }
  }

  std::vector<Var> grads;
  grads.reserve(inputs.size());
  for (const Var& in : inputs) {
    const int32_t slot = in.idx <= out_idx ? adj[static_cast<size_t>(in.idx)] : -1;
    if (slot >= 0)
      grads.push_back(at(slot));
    else
      grads.push_back(tape.leaf(Tensor::zeros(in.value().shape()), false));
  }
  return grads;
}

Var backward(Var output, Var input) {
  const Var ins[1] = {input};
  return backward(output, std::span<const Var>{ins, 1})[0];
}

std::vector<Tensor> grad(const ScalarFn& f, std::span<const Tensor> at) {
  Tape tape;
  std::vector<Var> xs;
  xs.reserve(at.size());
  for (const Tensor& t : at) xs.push_back(tape.leaf(t, true));
  Var out = f(tape, xs);
  if (out.tape != &tape) throw ContractError("grad: function must return a Var of the given tape");
  std::vector<Var> gs = backward(out, xs);
  std::vector<Tensor> result;
  result.reserve(gs.size());
  for (const Var& g : gs) result.push_back(g.value());
  return result;
}

std::vector<Tensor> grad_nested(const ScalarFn& f, std::span<const Tensor> at) {
  return grad(f, at);
}

} // namespace sqgn::ad
