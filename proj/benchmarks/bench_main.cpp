#include <benchmark/benchmark.h>

#include "mrconv/config.hpp"
#include "mrconv/conv.hpp"
#include "mrconv/data.hpp"
#include "mrconv/model.hpp"
#include "mrconv/mrlayer.hpp"
#include "mrconv/rng.hpp"

using namespace mrconv;

namespace {

SeqTensor random_input(std::size_t B, std::size_t D, std::size_t L, std::uint64_t seed) {
  SeqTensor u(B, D, L);
  CounterRng rng(seed);
  for (double& v : u.data()) v = rng.normal();
  return u;
}

// Direct vs FFT causal convolution, D = 16 channels, full-length kernel.
void conv_engine(benchmark::State& state, ConvStrategy strategy) {
  const auto L = static_cast<std::size_t>(state.range(0));
  const SeqTensor u = random_input(1, 16, L, 1);
  Matrix k(16, L);
  CounterRng rng(2);
  for (double& v : k.data()) v = rng.normal() / double(L);
  for (auto _ : state) benchmark::DoNotOptimize(causal_conv(u, k, {strategy, 64}));
}
BENCHMARK_CAPTURE(conv_engine, direct, ConvStrategy::direct)->RangeMultiplier(4)->Range(64, 4096)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(conv_engine, fft, ConvStrategy::fft)->RangeMultiplier(4)->Range(64, 8192)->Unit(benchmark::kMillisecond);

// One layer at D = 64 spanning L with l0 = 16: branched vs merged eval forward.
MRConvLayer make_layer(std::size_t L, KernelKind kind) {
  MRConvOptions o;
  o.channels = 64;
  o.max_len = L;
  o.base_len = 16;
  o.kind = kind;
  o.seed = 3;
  return MRConvLayer(o);
}

void layer_forward(benchmark::State& state, KernelKind kind, LayerMode mode) {
  const auto L = static_cast<std::size_t>(state.range(0));
  MRConvLayer layer = make_layer(L, kind);
  layer.set_mode(mode);
  const SeqTensor u = random_input(1, 64, L, 4);
  for (auto _ : state) benchmark::DoNotOptimize(layer.forward(u));
  state.counters["branches"] = double(layer.num_branches());
}
BENCHMARK_CAPTURE(layer_forward, fourier_branched, KernelKind::fourier, LayerMode::eval_branched)
    ->Arg(1024)->Arg(4096)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(layer_forward, fourier_merged, KernelKind::fourier, LayerMode::eval_merged)
    ->Arg(1024)->Arg(4096)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(layer_forward, dilated_branched, KernelKind::dilated, LayerMode::eval_branched)
    ->Arg(1024)->Arg(4096)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(layer_forward, dilated_merged, KernelKind::dilated, LayerMode::eval_merged)
    ->Arg(1024)->Arg(4096)->Unit(benchmark::kMillisecond);

// Building the merged kernel (done once per parameter update in eval).
void reparameterize(benchmark::State& state) {
  MRConvLayer layer = make_layer(static_cast<std::size_t>(state.range(0)), KernelKind::fourier);
  layer.set_mode(LayerMode::eval_branched);
  for (auto _ : state) {
    layer.invalidate();
    benchmark::DoNotOptimize(layer.reparameterize());
  }
}
BENCHMARK(reparameterize)->Arg(1024)->Arg(4096)->Unit(benchmark::kMillisecond);

// One optimizer step of the copy-memory model (batch 32, L 256).
void train_step(benchmark::State& state) {
  const RunConfig cfg = parse_config(R"(
model: {kernel: dilated, depth: 2, features: 16, kernel_size: 16, pool: last}
task: {kind: copy_memory, length: 256, classes: 8, n_symbols: 8, train_size: 32, val_size: 0, test_size: 1}
)");
  const Dataset ds = generate(cfg.task).train;
  Model model(model_options(cfg, ds.channels(), ds.length(), ds.classes, ds.labels_per_example));
  model.set_mode(LayerMode::train);
  auto params = model.parameters();
  AdamW opt(adamw_options(cfg));
  for (auto _ : state) {
    const auto lg = loss_and_gradients(model, params, ds.x, ds.labels);
    opt.step(params, lg.grads);
    model.parameters_changed();
  }
}
BENCHMARK(train_step)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
