#include <benchmark/benchmark.h>

#include "tomoforge/models.hpp"

using namespace tomoforge;

namespace {

Tensor<float> filled(Shape s, std::uint64_t seed) {
  Tensor<float> t(std::move(s));
  RandomStream rng(seed);
  for (auto& v : t.values()) v = static_cast<float>(rng.normal());
  return t;
}

// 3x3 conv, batch 8, C -> C channels at H x H.
void BM_Conv3x3(benchmark::State& st) {
  const auto c = static_cast<std::size_t>(st.range(0)), h = static_cast<std::size_t>(st.range(1));
  const auto x = filled({8, c, h, h}, 1), w = filled({c, c, 3, 3}, 2);
  for (auto _ : st) {
    Tape<float> t;
    benchmark::DoNotOptimize(conv2d(t.constant(x), t.constant(w), std::nullopt, 1, 1).value().data());
  }
}

void BM_Conv3x3Backward(benchmark::State& st) {
  const auto c = static_cast<std::size_t>(st.range(0)), h = static_cast<std::size_t>(st.range(1));
  const auto x = filled({8, c, h, h}, 1), w = filled({c, c, 3, 3}, 2);
  for (auto _ : st) {
    Tape<float> t;
    auto xv = t.variable(x);
    auto wv = t.variable(w);
    t.backward(sum(conv2d(xv, wv, std::nullopt, 1, 1)));
    benchmark::DoNotOptimize(t.grad(wv)->data());
  }
}

ModelDescriptor desk(int n) {
  ModelDescriptor d;
  d.image_size = d.n_angles = d.n_detectors = n;
  d.pixel_spacing = 2.0 / n;
  return d;
}

// One training step's worth of work for the end-to-end model, batch 8.
void BM_ReconStep(benchmark::State& st) {
  const int n = static_cast<int>(st.range(0));
  ReconNet<float> m(desk(n));
  const auto r = filled({8, 1, static_cast<std::size_t>(n), static_cast<std::size_t>(n)}, 3);
  for (auto _ : st) {
    Tape<float> t;
    auto y = m.forward(t.constant(r));
    t.backward(sum(square(y)));
    m.store().zero_grad();
  }
}

}  // namespace

BENCHMARK(BM_Conv3x3)->Args({16, 64})->Args({32, 32})->Args({64, 16})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv3x3Backward)->Args({16, 64})->Args({32, 32})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ReconStep)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
