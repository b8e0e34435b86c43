#include <benchmark/benchmark.h>
#include <omp.h>

#include <vector>

#include "mkd/data_synth.hpp"
#include "mkd/kernels.hpp"
#include "mkd/random.hpp"
#include "mkd/trainer.hpp"

using namespace mkd;
using kernels::ConvGeometry;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = uniform(rng, -1.0, 1.0);
  return v;
}

// Layers of the default networks at 64x64.
ConvGeometry layer(int index) {
  switch (index) {
    case 0: return {8, 64, 64, 8, 3, 1, 1};
    case 1: return {8, 64, 64, 16, 3, 2, 1};
    case 2: return {16, 32, 32, 16, 3, 1, 1};
    default: return {32, 16, 16, 32, 3, 1, 1};
  }
}

void set_flops(benchmark::State& state, const ConvGeometry& g) {
  const double flops = 2.0 * static_cast<double>(g.output_size()) * g.in_channels * g.kernel * g.kernel;
  state.counters["flops"] = benchmark::Counter(flops, benchmark::Counter::kIsIterationInvariantRate);
}

struct Buffers {
  explicit Buffers(const ConvGeometry& g)
      : in(random_values(g.input_size(), 1)),
        w(random_values(g.weight_size(), 2)),
        b(random_values(static_cast<std::size_t>(g.out_channels), 3)),
        go(random_values(g.output_size(), 4)),
        out(g.output_size()),
        gi(g.input_size()),
        gw(g.weight_size()),
        gb(static_cast<std::size_t>(g.out_channels)) {}
  std::vector<double> in, w, b, go, out, gi, gw, gb;
};

template <bool Parallel>
void BM_Forward(benchmark::State& state) {
  const ConvGeometry g = layer(static_cast<int>(state.range(0)));
  Buffers buf(g);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::conv2d_forward(g, buf.in, buf.w, buf.b, buf.out);
    } else {
      kernels::reference::conv2d_forward(g, buf.in, buf.w, buf.b, buf.out);
    }
    benchmark::DoNotOptimize(buf.out.data());
  }
  set_flops(state, g);
}

template <bool Parallel>
void BM_BackwardInput(benchmark::State& state) {
  const ConvGeometry g = layer(static_cast<int>(state.range(0)));
  Buffers buf(g);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::conv2d_backward_input(g, buf.go, buf.w, buf.gi);
    } else {
      kernels::reference::conv2d_backward_input(g, buf.go, buf.w, buf.gi);
    }
    benchmark::DoNotOptimize(buf.gi.data());
  }
  set_flops(state, g);
}

template <bool Parallel>
void BM_BackwardWeight(benchmark::State& state) {
  const ConvGeometry g = layer(static_cast<int>(state.range(0)));
  Buffers buf(g);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::conv2d_backward_weight(g, buf.go, buf.in, buf.gw, buf.gb);
    } else {
      kernels::reference::conv2d_backward_weight(g, buf.go, buf.in, buf.gw, buf.gb);
    }
    benchmark::DoNotOptimize(buf.gw.data());
  }
  set_flops(state, g);
}

// One full alternating iteration at the default network sizes.
void BM_TrainIteration(benchmark::State& state) {
  const Dataset target = synthesize_dataset(default_phantom_spec(ModalityStyle::B, 64, 4, 0), 2, 0, Modality::target);
  const Dataset assistant =
      synthesize_dataset(default_phantom_spec(ModalityStyle::A, 64, 4, 0), 2, 100, Modality::assistant);
  TrainingConfig cfg;
  cfg.mode = state.range(0) == 0 ? TrainingMode::mkd : TrainingMode::baseline;
  TrainerState s = initialize_state(cfg, 4);
  for (auto _ : state) {
    benchmark::DoNotOptimize(train_iteration(s, {target.samples[0]}, {assistant.samples[0]}, cfg));
  }
  state.SetLabel(to_string(cfg.mode));
}

}  // namespace

BENCHMARK(BM_Forward<true>)->Name("conv_forward/parallel")->DenseRange(0, 3)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Forward<false>)->Name("conv_forward/reference")->DenseRange(0, 3)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_BackwardInput<true>)->Name("conv_backward_input/parallel")->DenseRange(0, 3)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_BackwardInput<false>)->Name("conv_backward_input/reference")->DenseRange(0, 3)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_BackwardWeight<true>)->Name("conv_backward_weight/parallel")->DenseRange(0, 3)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_BackwardWeight<false>)->Name("conv_backward_weight/reference")->DenseRange(0, 3)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_TrainIteration)->Name("train_iteration")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
