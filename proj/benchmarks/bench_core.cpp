// Microbenchmarks for the kernels that dominate training time, plus the
// reverse-only jvp-vs-vjp cost ratio (the jvp needs a nested reverse pass;
// how close it stays to a single pass depends on tape pruning).

#include <benchmark/benchmark.h>

#include "sqgn/data.hpp"
#include "sqgn/gnop.hpp"
#include "sqgn/nn.hpp"
#include "sqgn/optim.hpp"
#include "sqgn/rng.hpp"

using namespace sqgn;

namespace {

Tensor random_tensor(Shape shape, uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::uninit(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

nn::Network reference_net() {
  return nn::Network({28, 28, 1}, {nn::Conv2d{-1, 2, 3, 3}, nn::Relu{}, nn::MaxPool2d{2, 2},
                                   nn::Conv2d{-1, 8, 4, 4}, nn::Relu{}, nn::MaxPool2d{2, 2},
                                   nn::Conv2d{-1, 12, 4, 4}, nn::Relu{}, nn::MaxPool2d{2, 2},
                                   nn::Flatten{}, nn::Dense{-1, 10}});
}

struct Fixture {
  nn::Network net = reference_net();
  nn::FlatParams params = nn::glorot_uniform_init(net.layout(), 1);
  data::Dataset train = data::make_synthetic_digits(500, 3, "bench");
  Batch batch{train.inputs, train.labels};
  gn::ModelProblem prob{net, loss::Kind::softmax_cross_entropy};
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

} // namespace

static void BM_Gemm(benchmark::State& state) {
  const int64_t n = state.range(0);
  const Tensor a = random_tensor({n, n}, 11);
  const Tensor b = random_tensor({n, n}, 12);
  for (auto _ : state) benchmark::DoNotOptimize(gemm(a, b));
}
BENCHMARK(BM_Gemm)->Arg(64)->Arg(256);

static void BM_Forward(benchmark::State& state) {
  auto& f = fixture();
  for (auto _ : state)
    benchmark::DoNotOptimize(f.net.forward_value(f.params.data, f.batch.inputs));
}
BENCHMARK(BM_Forward)->Unit(benchmark::kMillisecond);

static void BM_Gradient(benchmark::State& state) {
  auto& f = fixture();
  for (auto _ : state) benchmark::DoNotOptimize(f.prob.gradient(f.params.data, f.batch));
}
BENCHMARK(BM_Gradient)->Unit(benchmark::kMillisecond);

static void BM_Vjp(benchmark::State& state) {
  auto& f = fixture();
  gn::GnContext ctx{&f.net, loss::Kind::softmax_cross_entropy, f.batch.inputs, f.batch.labels,
                    f.params.data, false};
  const Tensor u = random_tensor({500, 10}, 13);
  for (auto _ : state) benchmark::DoNotOptimize(gn::vjp(ctx, u));
}
BENCHMARK(BM_Vjp)->Unit(benchmark::kMillisecond);

static void BM_Jvp(benchmark::State& state) {
  auto& f = fixture();
  gn::GnContext ctx{&f.net, loss::Kind::softmax_cross_entropy, f.batch.inputs, f.batch.labels,
                    f.params.data, false};
  const Tensor v = random_tensor({f.net.param_count()}, 14);
  for (auto _ : state) benchmark::DoNotOptimize(gn::jvp(ctx, v));
}
BENCHMARK(BM_Jvp)->Unit(benchmark::kMillisecond);

static void BM_GaussNewtonVp(benchmark::State& state) {
  auto& f = fixture();
  gn::GnContext ctx{&f.net, loss::Kind::softmax_cross_entropy, f.batch.inputs, f.batch.labels,
                    f.params.data, false};
  const Tensor v = random_tensor({f.net.param_count()}, 15);
  for (auto _ : state) benchmark::DoNotOptimize(gn::gauss_newton_vp(ctx, v));
}
BENCHMARK(BM_GaussNewtonVp)->Unit(benchmark::kMillisecond);

static void BM_TwoLoop(benchmark::State& state) {
  const int64_t m = 1962;
  Rng rng(16);
  opt::History hist(20);
  for (int i = 0; i < 20; ++i) {
    Tensor s = random_tensor({m}, 20 + static_cast<uint64_t>(i));
    hist.push({s, scale(s, 1.0 + rng.uniform())}); // positive curvature by construction
  }
  const Tensor g = random_tensor({m}, 17);
  for (auto _ : state) benchmark::DoNotOptimize(opt::lbfgs_two_loop(g, hist));
}
BENCHMARK(BM_TwoLoop);

BENCHMARK_MAIN();
