#include <benchmark/benchmark.h>

#include "tomoforge/data.hpp"
#include "tomoforge/radon.hpp"

using namespace tomoforge;

namespace {

ScanGeometry geom(benchmark::State& st) {
  const int n = static_cast<int>(st.range(0));
  return ScanGeometry::make(n, n, n, 2.0 / n);
}

template <typename T>
void BM_Forward(benchmark::State& st) {
  const auto g = geom(st);
  const auto img = shepp_logan(g.image_size);
  std::vector<T> x(img.values().begin(), img.values().end()), s(g.sinogram_entries());
  for (auto _ : st) {
    forward_project_into<T>(x, g, s);
    benchmark::DoNotOptimize(s.data());
  }
}

template <typename T>
void BM_Back(benchmark::State& st) {
  const auto g = geom(st);
  std::vector<T> s(g.sinogram_entries(), T(1)), x(g.image_pixels());
  for (auto _ : st) {
    back_project_into<T>(s, g, x);
    benchmark::DoNotOptimize(x.data());
  }
}

// Eight planes share one pass over the weight table.
void BM_ForwardPlanes(benchmark::State& st) {
  const auto g = geom(st);
  const std::size_t planes = 8;
  std::vector<float> x(planes * g.image_pixels(), 0.5f), s(planes * g.sinogram_entries());
  for (auto _ : st) {
    forward_project_planes<float>(x, planes, g, s);
    benchmark::DoNotOptimize(s.data());
  }
}

void BM_Fbp(benchmark::State& st) {
  const auto g = geom(st);
  const auto sino = forward_project(shepp_logan(g.image_size), g);
  for (auto _ : st) benchmark::DoNotOptimize(fbp_reconstruct(sino, g, RampWindow::ramlak));
}

}  // namespace

BENCHMARK(BM_Forward<double>)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Forward<float>)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Back<double>)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Back<float>)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ForwardPlanes)->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Fbp)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
