#include "mrconv/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ostream>

#include "mrconv/error.hpp"
#include "mrconv/rng.hpp"

namespace mrconv {

namespace {

template <class F>
double median_ms(F&& run, std::size_t repeats, std::size_t warmup) {
  for (std::size_t i = 0; i < warmup; ++i) run();
  std::vector<double> ms;
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run();
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  std::nth_element(ms.begin(), ms.begin() + static_cast<std::ptrdiff_t>(ms.size() / 2), ms.end());
  if (ms.size() % 2 == 1) return ms[ms.size() / 2];
  const double hi = ms[ms.size() / 2];
  return 0.5 * (hi + *std::max_element(ms.begin(), ms.begin() + static_cast<std::ptrdiff_t>(ms.size() / 2)));
}

std::string fmt(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

}  // namespace

BenchRow bench_layer(std::size_t L, std::size_t N, std::size_t D, const BenchOptions& options) {
  if (N == 0 || (L >> (N - 1)) == 0 || ((L >> (N - 1)) << (N - 1)) != L)
    throw Error(Errc::invalid_resolution, "L must be a multiple of 2^(N-1)");
  if (options.repeats == 0) throw Error(Errc::config_error, "bench needs at least one timed run");
  MRConvOptions o;
  o.channels = D;
  o.max_len = L;
  o.base_len = L >> (N - 1);
  o.num_branches = N;
  o.kind = options.kind;
  o.seed = options.seed;
  MRConvLayer layer(o);
  SeqTensor u(options.batch, D, L);
  CounterRng rng(options.seed, stream_id("bench"));
  for (double& v : u.data()) v = rng.normal();

  BenchRow row{L, N, D, 0.0, 0.0};
  layer.set_mode(LayerMode::eval_branched);
  row.branched_ms = median_ms([&] { (void)layer.forward_branched(u); }, options.repeats, options.warmup);
  layer.set_mode(LayerMode::eval_merged);
  row.merged_ms = median_ms([&] { (void)layer.forward_merged(u); }, options.repeats, options.warmup);
  return row;
}

void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows) {
  out << "L,N,D,branched_ms,merged_ms,speedup\n";
  for (const auto& r : rows)
    out << r.L << ',' << r.N << ',' << r.D << ',' << fmt(r.branched_ms) << ',' << fmt(r.merged_ms) << ','
        << fmt(r.speedup()) << '\n';
}

void write_kernel_csv(std::ostream& out, const MRConvLayer& layer, bool merged) {
  out << "branch,channel,t,value\n";
  auto rows = [&](const std::string& branch, const Matrix& k, std::size_t from) {
    for (std::size_t d = 0; d < k.rows(); ++d)
      for (std::size_t t = from; t < k.cols(); ++t)
        out << branch << ',' << d << ',' << t << ',' << fmt(k(d, t), 17) << '\n';
  };
  if (merged) {
    if (!layer.merged_current()) throw Error(Errc::stale_merge, "layer has no current merged kernel");
    rows("merged", layer.merged()->kernel, 0);
    return;
  }
  for (std::size_t i = 0; i < layer.num_branches(); ++i) rows(std::to_string(i), layer.placed_kernel(i), layer.branch(i).offset);
}

}  // namespace mrconv
