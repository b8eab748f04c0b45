#pragma once

#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "sqgn/autodiff.hpp"
#include "sqgn/tensor.hpp"

namespace sqgn::nn {

// Layer descriptors. Input dimensions of -1 are inferred when the Network is
// built. Convolutions use valid padding and stride 1; activations are NHWC.

struct Dense {
  int64_t in = -1;
  int64_t out = 0;
  bool bias = true;
};

struct Conv2d {
  int64_t in_ch = -1;
  int64_t out_ch = 0;
  int64_t kh = 0;
  int64_t kw = 0;
  bool bias = true;
};

struct Relu {};

struct MaxPool2d {
  int64_t ph = 0;
  int64_t pw = 0;
};

struct Flatten {};

using Layer = std::variant<Dense, Conv2d, Relu, MaxPool2d, Flatten>;

/// One parameter tensor's slot inside the flat weight vector.
struct Segment {
  int64_t offset = 0;
  Shape shape;
  int64_t fan_in = 0;
  int64_t fan_out = 0;
  bool is_bias = false;
};

/// The weight vector w as a single contiguous rank-1 tensor plus the layout
/// mapping segments back to per-layer tensors.
struct FlatParams {
  Tensor data;
  std::vector<Segment> layout;
  int64_t size() const { return data.size(); }
};

/// Immutable network descriptor; forward is a pure function of (w, x).
class Network {
public:
  Network(Shape input_shape, std::vector<Layer> layers);

  const Shape& input_shape() const { return input_shape_; }
  const std::vector<Layer>& layers() const { return layers_; }
  const std::vector<Segment>& layout() const { return layout_; }
  int64_t param_count() const { return param_count_; }
  int64_t output_dim() const { return output_dim_; }

  /// Graph forward for a batch x of shape (N, ...input_shape); w is the flat
  /// weight Var. Returns pre-softmax logits for classifier networks.
  ad::Var forward(ad::Tape& tape, ad::Var w, const Tensor& x) const;

  /// Forward evaluation only (internal tape, discarded).
  Tensor forward_value(const Tensor& w, const Tensor& x) const;

private:
  Shape input_shape_;
  std::vector<Layer> layers_;
  std::vector<Segment> layout_;
  int64_t param_count_ = 0;
  int64_t output_dim_ = 0;
};

/// Weights uniform on [-b, b] with b = sqrt(6/(fan_in+fan_out)); biases zero.
FlatParams glorot_uniform_init(const std::vector<Segment>& layout, uint64_t seed);

/// Per-segment tensors of a flat vector.
std::vector<Tensor> unflatten(const FlatParams& params);

/// Inverse of unflatten given the same layout.
FlatParams flatten(std::span<const Tensor> parts, const std::vector<Segment>& layout);

} // namespace sqgn::nn
