#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "sqgn/errors.hpp"
#include "sqgn/tensor.hpp"

namespace sqgn::ad {

// Reverse-mode tape. Adjoint propagation is itself emitted as tape ops, so a
// gradient is an ordinary Var and can be differentiated again; that is all
// the machinery nested (reverse-over-reverse) differentiation needs.

enum class Op : uint8_t {
  leaf,
  add,
  sub,
  mul,
  neg,
  scale,
  matmul,
  matmul_tn,
  matmul_nt,
  transpose2d,
  reshape,
  slice,
  pad_to,
  conv2d,
  conv_x_grad,
  conv_k_grad,
  bias_nhwc,
  channel_sum,
  rep_channels,
  gather,
  scatter_add,
  sum_all,
  expand_scalar,
  row_sum,
  col_sum,
  rep_rows,
  rep_cols,
  relu,
  relu_grad,
  exp_op,
  log_op,
  reciprocal,
};

const char* op_name(Op op);

using IndexMap = std::vector<int64_t>;

struct Node {
  Tensor value;
  std::shared_ptr<const IndexMap> map; // gather / scatter_add
  Shape aux_shape;                     // col2im image shape, scatter_add output shape
  double scalar = 0.0;                 // scale factor
  int32_t a = -1;
  int32_t b = -1;
  int32_t i0 = 0; // slice offset / im2col kh / pad_to offset / rep count
  int32_t i1 = 0; // im2col kw
  Op op = Op::leaf;
  bool requires_grad = false;
};

class Tape;

/// Lightweight handle to a tape node. Valid only for the generation it was
/// created in; using it after Tape::clear raises TapeError.
struct Var {
  Tape* tape = nullptr;
  uint64_t gen = 0;
  int32_t idx = -1;

  const Tensor& value() const;
  const Shape& shape() const;
};

class Tape {
public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);

  /// Discards every node and invalidates all outstanding Vars.
  void clear();

  uint64_t generation() const { return gen_; }
  size_t size() const { return nodes_.size(); }

  Node& node(const Var& v);
  const Node& node(const Var& v) const;
  Var emit(Node n);

private:
  void check(const Var& v) const;

  std::vector<Node> nodes_;
  uint64_t gen_ = 1;
};

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double c);
Var matmul(Var a, Var b);
/// a^T * b without materializing the transpose.
Var matmul_tn(Var a, Var b);
/// a * b^T without materializing the transpose.
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, Shape shape);
/// Contiguous range [offset, offset+len) of the flattened input, as rank-1.
Var slice(Var a, int64_t offset, int64_t len);
/// Inverse of slice: place the flattened input at [offset, offset+size) in a
/// zero rank-1 tensor of length total.
Var pad_to(Var a, int64_t offset, int64_t total);
/// Valid-padding stride-1 cross-correlation: x (N,H,W,Ci) with kernel
/// (KH,KW,Ci,Co) -> (N,OH,OW,Co). conv_x_grad and conv_k_grad are its two
/// partial adjoints; the triple is closed under differentiation.
Var conv2d(Var x, Var kernel);
/// Adjoint of conv2d with respect to x: g (N,OH,OW,Co) -> image_shape.
Var conv_x_grad(Var g, Var kernel, Shape image_shape);
/// Adjoint of conv2d with respect to the kernel: accumulates x against g.
Var conv_k_grad(Var x, Var g, Shape kernel_shape);
/// x (..., C) plus a per-channel bias (C), one fused pass.
Var bias_nhwc(Var x, Var bias);
/// (..., C) -> (C): sum over all leading positions per channel.
Var channel_sum(Var a);
/// (C) -> shape (..., C): broadcast per channel.
Var rep_channels(Var a, Shape shape);
/// out[i] = in[map[i]]; map.size() == numel(out_shape).
Var gather(Var a, std::shared_ptr<const IndexMap> map, Shape out_shape);
/// out[map[i]] += in[i] over zero-initialized out_shape.
Var scatter_add(Var a, std::shared_ptr<const IndexMap> map, Shape out_shape);
Var sum(Var a);
Var expand_scalar(Var a, Shape shape);
/// (R,C) -> (R): sum across each row.
Var row_sum(Var a);
/// (R,C) -> (C): sum down each column.
Var col_sum(Var a);
/// (C) -> (rows,C): repeat the vector as every row.
Var rep_rows(Var a, int64_t rows);
/// (R) -> (R,cols): repeat each entry across its row.
Var rep_cols(Var a, int64_t cols);
Var relu(Var a);
/// g * 1[x > 0]; the subgradient at 0 is 0.
Var relu_grad(Var g, Var x);
Var exp(Var a);
Var log(Var a);
Var reciprocal(Var a);
Var dot(Var a, Var b);

/// Reverse pass from a scalar output. Returns one adjoint Var per input
/// (zeros for inputs the output does not depend on). The adjoints are
/// recorded on the same tape and are differentiable in turn.
std::vector<Var> backward(Var output, std::span<const Var> inputs);
Var backward(Var output, Var input);

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

/// Gradient of a scalar function at the given point (fresh tape inside).
std::vector<Tensor> grad(const ScalarFn& f, std::span<const Tensor> at);

/// Entry point for functions whose body performs inner backward passes;
/// identical machinery to grad, named for the nested contract.
std::vector<Tensor> grad_nested(const ScalarFn& f, std::span<const Tensor> at);

} // namespace sqgn::ad
