#include "sqgn/nn.hpp"

#include <cmath>
#include <cstring>

#include "sqgn/errors.hpp"
#include "sqgn/rng.hpp"

namespace sqgn::nn {

namespace {

void expect_positive_extents(const Shape& s, const char* what) {
  for (int64_t e : s)
    if (e <= 0) throw ArchitectureError(std::string(what) + ": nonpositive extent in " + shape_str(s));
}

} // namespace

Network::Network(Shape input_shape, std::vector<Layer> layers)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
  expect_positive_extents(input_shape_, "network input");
  if (input_shape_.size() != 1 && input_shape_.size() != 3)
    throw ArchitectureError("network input must be (d) or (H,W,C), got " + shape_str(input_shape_));

  Shape cur = input_shape_;
  int64_t offset = 0;
  for (size_t li = 0; li < layers_.size(); ++li) {
    Layer& layer = layers_[li];
    const std::string where = "layer " + std::to_string(li);
    if (auto* d = std::get_if<Dense>(&layer)) {
      if (cur.size() != 1)
        throw ArchitectureError(where + ": dense needs rank-1 activations, have " + shape_str(cur));
      if (d->in < 0) d->in = cur[0];
      if (d->in != cur[0])
        throw ArchitectureError(where + ": dense expects " + std::to_string(d->in) +
                                " inputs, activations have " + std::to_string(cur[0]));
      if (d->out <= 0) throw ArchitectureError(where + ": dense output must be positive");
      layout_.push_back({offset, {d->in, d->out}, d->in, d->out, false});
      offset += d->in * d->out;
      if (d->bias) {
        layout_.push_back({offset, {d->out}, d->in, d->out, true});
        offset += d->out;
      }
      cur = {d->out};
    } else if (auto* c = std::get_if<Conv2d>(&layer)) {
      if (cur.size() != 3)
        throw ArchitectureError(where + ": conv2d needs (H,W,C) activations, have " + shape_str(cur));
      if (c->in_ch < 0) c->in_ch = cur[2];
      if (c->in_ch != cur[2])
        throw ArchitectureError(where + ": conv2d expects " + std::to_string(c->in_ch) +
                                " channels, activations have " + std::to_string(cur[2]));
      if (c->out_ch <= 0 || c->kh <= 0 || c->kw <= 0)
        throw ArchitectureError(where + ": conv2d kernel and channels must be positive");
      if (c->kh > cur[0] || c->kw > cur[1])
        throw ArchitectureError(where + ": kernel " + std::to_string(c->kh) + "x" +
                                std::to_string(c->kw) + " larger than input " + shape_str(cur));
      const int64_t fan_in = c->kh * c->kw * c->in_ch;
      const int64_t fan_out = c->kh * c->kw * c->out_ch;
      layout_.push_back({offset, {c->kh, c->kw, c->in_ch, c->out_ch}, fan_in, fan_out, false});
      offset += fan_in * c->out_ch;
      if (c->bias) {
        layout_.push_back({offset, {c->out_ch}, fan_in, fan_out, true});
        offset += c->out_ch;
      }
      cur = {cur[0] - c->kh + 1, cur[1] - c->kw + 1, c->out_ch};
    } else if (std::holds_alternative<Relu>(layer)) {
      // shape unchanged
    } else if (auto* p = std::get_if<MaxPool2d>(&layer)) {
      if (cur.size() != 3)
        throw ArchitectureError(where + ": maxpool2d needs (H,W,C) activations, have " + shape_str(cur));
      if (p->ph <= 0 || p->pw <= 0)
        throw ArchitectureError(where + ": pool extents must be positive");
      if (cur[0] % p->ph != 0 || cur[1] % p->pw != 0)
        throw ArchitectureError(where + ": activations " + shape_str(cur) +
                                " not divisible by pool " + std::to_string(p->ph) + "x" +
                                std::to_string(p->pw));
      cur = {cur[0] / p->ph, cur[1] / p->pw, cur[2]};
    } else if (std::holds_alternative<Flatten>(layer)) {
      cur = {shape_numel(cur)};
    }
    expect_positive_extents(cur, where.c_str());
  }
  if (cur.size() != 1)
    throw ArchitectureError("network output must be rank-1; add a flatten layer (final shape " +
                            shape_str(cur) + ")");
  param_count_ = offset;
  output_dim_ = cur[0];
}

ad::Var Network::forward(ad::Tape& tape, ad::Var w, const Tensor& x) const {
  if (w.value().rank() != 1 || w.value().size() != param_count_)
    throw DimensionError("forward: expected flat weights of length " +
                         std::to_string(param_count_) + ", got " + shape_str(w.value().shape()));
  Shape expected = input_shape_;
  expected.insert(expected.begin(), x.rank() > 0 ? x.extent(0) : 0);
  if (!same_shape(x.shape(), expected))
    throw DimensionError("forward: input " + shape_str(x.shape()) + " does not match batch shape " +
                         shape_str(expected));
  const int64_t batch = x.extent(0);

  ad::Var h = tape.leaf(x, false);
  size_t seg = 0;
  for (const Layer& layer : layers_) {
    if (const auto* d = std::get_if<Dense>(&layer)) {
      const Segment& ws = layout_[seg++];
      ad::Var wm = ad::reshape(ad::slice(w, ws.offset, d->in * d->out), {d->in, d->out});
      h = ad::matmul(h, wm);
      if (d->bias) {
        const Segment& bs = layout_[seg++];
        h = ad::add(h, ad::rep_rows(ad::slice(w, bs.offset, d->out), batch));
      }
    } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
      const Segment& ws = layout_[seg++];
      ad::Var kernel =
          ad::reshape(ad::slice(w, ws.offset, c->kh * c->kw * c->in_ch * c->out_ch),
                      {c->kh, c->kw, c->in_ch, c->out_ch});
      ad::Var z = ad::conv2d(h, kernel);
      if (c->bias) {
        const Segment& bs = layout_[seg++];
        z = ad::bias_nhwc(z, ad::slice(w, bs.offset, c->out_ch));
      }
      h = z;
    } else if (std::holds_alternative<Relu>(layer)) {
      h = ad::relu(h);
    } else if (const auto* p = std::get_if<MaxPool2d>(&layer)) {
      const Shape s = h.shape(); // (N, H, W, C)
      const int64_t H = s[1], W = s[2], C = s[3];
      const int64_t OH = H / p->ph, OW = W / p->pw;
      auto map = std::make_shared<ad::IndexMap>(static_cast<size_t>(batch * OH * OW * C));
      const double* v = h.value().data().data();
      int64_t* mp = map->data();
#pragma omp parallel for schedule(static) if (batch > 32)
      for (int64_t n = 0; n < batch; ++n) {
        size_t out_i = static_cast<size_t>(n * OH * OW * C);
        for (int64_t oy = 0; oy < OH; ++oy)
          for (int64_t ox = 0; ox < OW; ++ox)
            for (int64_t ch = 0; ch < C; ++ch) {
              int64_t best = ((n * H + oy * p->ph) * W + ox * p->pw) * C + ch;
              double best_v = v[best];
              for (int64_t dy = 0; dy < p->ph; ++dy)
                for (int64_t dx = 0; dx < p->pw; ++dx) {
                  const int64_t idx = ((n * H + oy * p->ph + dy) * W + ox * p->pw + dx) * C + ch;
                  if (v[idx] > best_v) { // strict: first occurrence wins ties
                    best_v = v[idx];
                    best = idx;
                  }
                }
              mp[out_i++] = best;
            }
      }
      h = ad::gather(h, std::move(map), {batch, OH, OW, C});
    } else if (std::holds_alternative<Flatten>(layer)) {
      h = ad::reshape(h, {batch, shape_numel(h.shape()) / batch});
    }
  }
  return h;
}

Tensor Network::forward_value(const Tensor& w, const Tensor& x) const {
  ad::Tape tape;
  return forward(tape, tape.leaf(w, false), x).value();
}

FlatParams glorot_uniform_init(const std::vector<Segment>& layout, uint64_t seed) {
  if (layout.empty()) throw ContractError("glorot_uniform_init: empty layout");
  int64_t total = 0;
  for (const Segment& s : layout) total = std::max(total, s.offset + shape_numel(s.shape));
  Tensor data = Tensor::zeros({total});
  auto dst = data.mutable_data();
  Rng rng(seed);
  for (const Segment& s : layout) {
    if (s.is_bias) continue; // biases stay zero
    if (s.fan_in + s.fan_out <= 0)
      throw ArchitectureError("glorot_uniform_init: degenerate layer with zero fan");
    const double b = std::sqrt(6.0 / static_cast<double>(s.fan_in + s.fan_out));
    const int64_t count = shape_numel(s.shape);
    for (int64_t i = 0; i < count; ++i) dst[static_cast<size_t>(s.offset + i)] = rng.uniform(-b, b);
  }
  return {data, layout};
}

std::vector<Tensor> unflatten(const FlatParams& params) {
  std::vector<Tensor> parts;
  parts.reserve(params.layout.size());
  for (const Segment& s : params.layout) {
    const int64_t count = shape_numel(s.shape);
    Tensor t = Tensor::uninit(s.shape);
    std::memcpy(t.mutable_data().data(), params.data.data().data() + s.offset,
                static_cast<size_t>(count) * sizeof(double));
    parts.push_back(std::move(t));
  }
  return parts;
}

FlatParams flatten(std::span<const Tensor> parts, const std::vector<Segment>& layout) {
  if (parts.size() != layout.size())
    throw DimensionError("flatten: " + std::to_string(parts.size()) + " parts for " +
                         std::to_string(layout.size()) + " segments");
  int64_t total = 0;
  for (const Segment& s : layout) total = std::max(total, s.offset + shape_numel(s.shape));
  Tensor data = Tensor::zeros({total});
  auto dst = data.mutable_data();
  for (size_t i = 0; i < layout.size(); ++i) {
    const Segment& s = layout[i];
    if (!same_shape(parts[i].shape(), s.shape))
      throw DimensionError("flatten: part " + std::to_string(i) + " has shape " +
                           shape_str(parts[i].shape()) + ", segment expects " + shape_str(s.shape));
    std::memcpy(dst.data() + s.offset, parts[i].data().data(),
                static_cast<size_t>(parts[i].size()) * sizeof(double));
  }
  return {data, layout};
}

} // namespace sqgn::nn
