// Serial reference kernels vs the OpenMP/BLAS/FFT versions, at the shapes
// the desk models actually use. Run with OMP_NUM_THREADS to vary threads.
#include <benchmark/benchmark.h>

#include <random>

#include "convsr/frontend.hpp"
#include "convsr/kernels.hpp"

using namespace convsr;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (auto& v : m.values()) v = n(rng);
  return m;
}

std::vector<double> random_vector(std::size_t n, std::uint64_t seed) {
  const Matrix m = random_matrix(1, n, seed);
  return {m.values().begin(), m.values().end()};
}

// Second conv-GLU layer of the default acoustic model on 1 s of audio:
// 32 -> 2*64 channels, width 13, 96 frames.
kernels::ConvGeometry layer_geometry() { return {32, 128, 13, 1, 6, 6}; }

template <bool Serial>
void BM_Conv1dForward(benchmark::State& state) {
  const auto geo = layer_geometry();
  const Matrix x = random_matrix(geo.in_channels, 96, 1);
  const auto w = random_vector(geo.out_channels * geo.in_channels * geo.width, 2);
  const auto b = random_vector(geo.out_channels, 3);
  for (auto _ : state) {
    auto y = Serial ? kernels::serial::conv1d_forward(x, w, b, geo) : kernels::conv1d_forward(x, w, b, geo);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Serial>
void BM_Conv1dBackward(benchmark::State& state) {
  const auto geo = layer_geometry();
  const Matrix x = random_matrix(geo.in_channels, 96, 1);
  const auto w = random_vector(geo.out_channels * geo.in_channels * geo.width, 2);
  const Matrix up = random_matrix(geo.out_channels, geo.output_length(96), 4);
  for (auto _ : state) {
    auto g = Serial ? kernels::serial::conv1d_backward(x, w, up, geo) : kernels::conv1d_backward(x, w, up, geo);
    benchmark::DoNotOptimize(g.weight.data());
  }
}

// 40 complex filters of width 400 over `range(0)` samples.
template <bool Serial>
void BM_ComplexConvPower(benchmark::State& state) {
  const auto signal = random_vector(static_cast<std::size_t>(state.range(0)), 5);
  const Matrix re = random_matrix(40, 400, 6), im = random_matrix(40, 400, 7);
  for (auto _ : state) {
    auto r = Serial ? kernels::serial::complex_conv_power(signal, re, im) : kernels::complex_conv_power(signal, re, im);
    benchmark::DoNotOptimize(r.power.data());
  }
}

template <bool Serial>
void BM_ComplexConvPowerBackward(benchmark::State& state) {
  const auto signal = random_vector(static_cast<std::size_t>(state.range(0)), 5);
  const Matrix re = random_matrix(40, 400, 6), im = random_matrix(40, 400, 7);
  const auto fwd = kernels::complex_conv_power(signal, re, im);
  const Matrix up = random_matrix(fwd.power.rows(), fwd.power.cols(), 8);
  for (auto _ : state) {
    auto g = Serial ? kernels::serial::complex_conv_power_backward(signal, re, im, fwd, up)
                    : kernels::complex_conv_power_backward(signal, re, im, fwd, up);
    benchmark::DoNotOptimize(g.signal.data());
  }
}

template <bool Serial>
void BM_LowpassDecimate(benchmark::State& state) {
  const Matrix p = random_matrix(40, 15601, 9);
  const auto window = frontend::squared_hanning(400);
  for (auto _ : state) {
    auto y = Serial ? kernels::serial::lowpass_decimate(p, window, 160) : kernels::lowpass_decimate(p, window, 160);
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(BM_Conv1dForward<true>)->Name("conv1d_forward/serial");
BENCHMARK(BM_Conv1dForward<false>)->Name("conv1d_forward/parallel");
BENCHMARK(BM_Conv1dBackward<true>)->Name("conv1d_backward/serial");
BENCHMARK(BM_Conv1dBackward<false>)->Name("conv1d_backward/parallel");
BENCHMARK(BM_ComplexConvPower<true>)->Name("complex_conv_power/serial")->Arg(4000)->Arg(16000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ComplexConvPower<false>)->Name("complex_conv_power/parallel")->Arg(4000)->Arg(16000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ComplexConvPowerBackward<true>)->Name("complex_conv_power_backward/serial")->Arg(16000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ComplexConvPowerBackward<false>)->Name("complex_conv_power_backward/parallel")->Arg(16000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_LowpassDecimate<true>)->Name("lowpass_decimate/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_LowpassDecimate<false>)->Name("lowpass_decimate/parallel")->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
