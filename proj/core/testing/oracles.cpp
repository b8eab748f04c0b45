#include "oracles.hpp"

#include <cmath>

#include "sqgn/errors.hpp"
#include "sqgn/rng.hpp"

namespace sqgn::testing {

Tensor gemm_naive(const Tensor& a, const Tensor& b) {
  const int64_t r = a.extent(0), k = a.extent(1), c = b.extent(1);
  Tensor out = Tensor::zeros({r, c});
  const auto da = a.data();
  const auto db = b.data();
  auto dst = out.mutable_data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) {
      double acc = 0.0;
      for (int64_t kk = 0; kk < k; ++kk)
        acc += da[static_cast<size_t>(i * k + kk)] * db[static_cast<size_t>(kk * c + j)];
      dst[static_cast<size_t>(i * c + j)] = acc;
    }
  return out;
}

double dot_naive(const Tensor& a, const Tensor& b) {
  const auto da = a.data();
  const auto db = b.data();
  double acc = 0.0;
  for (size_t i = 0; i < da.size(); ++i) acc += da[i] * db[i];
  return acc;
}

Tensor conv2d_naive(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  const int64_t n = x.extent(0), h = x.extent(1), w = x.extent(2), c = x.extent(3);
  const int64_t kh = kernel.extent(0), kw = kernel.extent(1), oc = kernel.extent(3);
  const int64_t oh = h - kh + 1, ow = w - kw + 1;
  Tensor out = Tensor::zeros({n, oh, ow, oc});
  const auto xv = x.data();
  const auto kv = kernel.data();
  auto dst = out.mutable_data();
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t oy = 0; oy < oh; ++oy)
      for (int64_t ox = 0; ox < ow; ++ox)
        for (int64_t co = 0; co < oc; ++co) {
          double acc = bias.size() > 0 ? bias[co] : 0.0;
          for (int64_t dy = 0; dy < kh; ++dy)
            for (int64_t dx = 0; dx < kw; ++dx)
              for (int64_t ci = 0; ci < c; ++ci)
                acc += xv[static_cast<size_t>(((ni * h + oy + dy) * w + ox + dx) * c + ci)] *
                       kv[static_cast<size_t>(((dy * kw + dx) * c + ci) * oc + co)];
          dst[static_cast<size_t>(((ni * oh + oy) * ow + ox) * oc + co)] = acc;
        }
  return out;
}

Tensor fd_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor g = Tensor::zeros(x.shape());
  auto gv = g.mutable_data();
  for (int64_t i = 0; i < x.size(); ++i) {
    Tensor xp = Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
    Tensor xm = Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
    xp.mutable_data()[static_cast<size_t>(i)] += eps;
    xm.mutable_data()[static_cast<size_t>(i)] -= eps;
    gv[static_cast<size_t>(i)] = (f(xp) - f(xm)) / (2.0 * eps);
  }
  return g;
}

Tensor fd_directional(const std::function<Tensor(const Tensor&)>& h, const Tensor& x,
                      const Tensor& v, double eps) {
  const Tensor hp = h(axpy(eps, v, x));
  const Tensor hm = h(axpy(-eps, v, x));
  return scale(sub(hp, hm), 1.0 / (2.0 * eps));
}

Tensor assemble_columns(int64_t rows, int64_t cols,
                        const std::function<Tensor(const Tensor&)>& probe) {
  Tensor m = Tensor::zeros({rows, cols});
  auto mv = m.mutable_data();
  for (int64_t j = 0; j < cols; ++j) {
    Tensor e = Tensor::zeros({cols});
    e.mutable_data()[static_cast<size_t>(j)] = 1.0;
    const Tensor col = probe(e);
    if (col.size() != rows) throw DimensionError("assemble_columns: probe returned wrong size");
    for (int64_t i = 0; i < rows; ++i)
      mv[static_cast<size_t>(i * cols + j)] = col[i];
  }
  return m;
}

Tensor matvec(const Tensor& m, const Tensor& v) {
  return gemm(m, v.reshaped({v.size(), 1})).reshaped({m.extent(0)});
}

Tensor dense_bfgs_direction(const Tensor& g, const opt::History& history) {
  const int64_t m = g.size();
  if (history.empty()) return neg(g);
  const auto& newest = history[history.size() - 1];
  const double gamma = dot(newest.s, newest.v) / dot(newest.v, newest.v);
  // H starts as gamma * I
  Tensor h = Tensor::zeros({m, m});
  for (int64_t i = 0; i < m; ++i) h.mutable_data()[static_cast<size_t>(i * m + i)] = gamma;
  for (size_t pi = 0; pi < history.size(); ++pi) {
    const Tensor& s = history[pi].s;
    const Tensor& v = history[pi].v;
    const double rho = 1.0 / dot_naive(v, s);
    // A = I - rho * s v^T
    Tensor a = Tensor::zeros({m, m});
    auto av = a.mutable_data();
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t j = 0; j < m; ++j)
        av[static_cast<size_t>(i * m + j)] = -rho * s[i] * v[j];
      av[static_cast<size_t>(i * m + i)] += 1.0;
    }
    h = gemm_naive(gemm_naive(a, h), transpose(a));
    auto hv = h.mutable_data();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < m; ++j) hv[static_cast<size_t>(i * m + j)] += rho * s[i] * s[j];
  }
  return neg(matvec(h, g));
}

std::vector<std::vector<int64_t>> combinations(int64_t n, int64_t k) {
  std::vector<std::vector<int64_t>> out;
  std::vector<int64_t> cur(static_cast<size_t>(k));
  for (int64_t i = 0; i < k; ++i) cur[static_cast<size_t>(i)] = i;
  while (true) {
    out.push_back(cur);
    int64_t i = k - 1;
    while (i >= 0 && cur[static_cast<size_t>(i)] == n - k + i) --i;
    if (i < 0) break;
    ++cur[static_cast<size_t>(i)];
    for (int64_t j = i + 1; j < k; ++j) cur[static_cast<size_t>(j)] = cur[static_cast<size_t>(j - 1)] + 1;
  }
  return out;
}

double max_rel_error(const Tensor& a, const Tensor& b, double floor) {
  if (a.size() != b.size()) throw DimensionError("max_rel_error: size mismatch");
  double worst = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    const double denom = std::max(std::abs(b[i]), floor);
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

RandomNet random_dense_relu_net(uint64_t seed, int64_t max_params, int64_t batch,
                                double kink_margin) {
  for (uint64_t attempt = 0;; ++attempt) {
    Rng rng(seed * 1000003 + attempt);
    // 1-2 hidden layers sized to stay under the parameter budget
    const int64_t in = 2 + static_cast<int64_t>(rng.below(3));
    const int64_t hidden = 3 + static_cast<int64_t>(rng.below(3));
    const int64_t out = 2 + static_cast<int64_t>(rng.below(3));
    const bool two_hidden = rng.below(2) == 1;
    std::vector<nn::Layer> layers;
    layers.push_back(nn::Dense{in, hidden});
    layers.push_back(nn::Relu{});
    if (two_hidden) {
      layers.push_back(nn::Dense{hidden, hidden});
      layers.push_back(nn::Relu{});
    }
    layers.push_back(nn::Dense{hidden, out});
    nn::Network net({in}, std::move(layers));
    if (net.param_count() > max_params) continue;

    Tensor w = Tensor::uninit({net.param_count()});
    for (double& v : w.mutable_data()) v = rng.uniform(-0.9, 0.9);
    Tensor x = Tensor::uninit({batch, in});
    for (double& v : x.mutable_data()) v = rng.uniform(-1.2, 1.2);

    // keep every pre-activation away from the ReLU kink
    ad::Tape tape;
    ad::Var wv = tape.leaf(w, false);
    bool clear = true;
    ad::Var h = net.forward(tape, wv, x);
    for (size_t i = 0; i < tape.size() && clear; ++i) {
      const ad::Node& node = tape.node(ad::Var{&tape, tape.generation(), static_cast<int32_t>(i)});
      if (node.op != ad::Op::relu) continue;
      const ad::Node& parent =
          tape.node(ad::Var{&tape, tape.generation(), node.a});
      for (double v : parent.value.data())
        if (std::abs(v) < kink_margin) {
          clear = false;
          break;
        }
    }
    if (!clear) continue;

    Tensor y_mse = Tensor::uninit(h.value().shape());
    for (double& v : y_mse.mutable_data()) v = rng.uniform(-1.0, 1.0);
    Tensor y_ce = Tensor::uninit({batch});
    for (double& v : y_ce.mutable_data())
      v = static_cast<double>(rng.below(static_cast<uint64_t>(out)));
    return {std::move(net), std::move(w), std::move(x), std::move(y_mse), std::move(y_ce)};
  }
}

} // namespace sqgn::testing
