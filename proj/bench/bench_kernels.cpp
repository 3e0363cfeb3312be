#include <benchmark/benchmark.h>

#include <random>

#include "convreg/kernels.hpp"
#include "convreg/network.hpp"

using namespace convreg;

namespace {

Tensor<float> random_input(int n, int c, int d) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor<float> t(n, c, cube(d));
  for (auto& v : t.data) v = u(rng);
  return t;
}

ConvLayer<float> random_conv(int in, int out, int k, int s) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u(-0.1f, 0.1f);
  ConvLayer<float> l(in, out, k, s, true);
  for (auto& w : l.weights) w = u(rng);
  return l;
}

// First reference layer on a 48^3 fixed/warped pair: 2 -> 16 channels, k5 s2.
template <bool Serial>
void BM_ConvForward(benchmark::State& state) {
  const auto in = random_input(1, 2, static_cast<int>(state.range(0)));
  const auto layer = random_conv(2, 16, 5, 2);
  for (auto _ : state) {
    auto out = Serial ? serial::conv3d_forward(in, layer) : conv3d_forward(in, layer);
    benchmark::DoNotOptimize(out.data.data());
  }
}

template <bool Serial>
void BM_ConvBackward(benchmark::State& state) {
  const auto in = random_input(1, 2, static_cast<int>(state.range(0)));
  const auto layer = random_conv(2, 16, 5, 2);
  const auto out = conv3d_forward(in, layer);
  Tensor<float> grad(out.batch, out.channels, out.dims);
  for (auto& g : grad.data) g = 1.0f;
  for (auto _ : state) {
    auto g = Serial ? serial::conv3d_backward(grad, layer, in, out) : conv3d_backward(grad, layer, in, out);
    benchmark::DoNotOptimize(g.kernel.data());
  }
}

// Whole reference network over a full volume: the per-iteration cost of the metric.
void BM_NetworkInputGradient(benchmark::State& state) {
  const auto net = init_network<float>(Architecture::reference(), 3);
  const auto pair = random_input(1, 2, static_cast<int>(state.range(0)));
  for (auto _ : state) {
    auto g = input_gradient(net, pair);
    benchmark::DoNotOptimize(g.data.data());
  }
}

}  // namespace

BENCHMARK(BM_ConvForward<true>)->Name("conv_forward/serial")->Arg(24)->Arg(48)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvForward<false>)->Name("conv_forward/fast")->Arg(24)->Arg(48)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvBackward<true>)->Name("conv_backward/serial")->Arg(24)->Arg(48)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvBackward<false>)->Name("conv_backward/fast")->Arg(24)->Arg(48)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_NetworkInputGradient)->Arg(24)->Arg(48)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
