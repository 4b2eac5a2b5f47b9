#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mrconv/kernels.hpp"
#include "mrconv/mrlayer.hpp"

namespace mrconv {

struct BenchRow {
  std::size_t L = 0, N = 0, D = 0;
  double branched_ms = 0.0;
  double merged_ms = 0.0;
  double speedup() const noexcept { return merged_ms > 0.0 ? branched_ms / merged_ms : 0.0; }
};

struct BenchOptions {
  KernelKind kind = KernelKind::fourier;
  std::size_t batch = 1;
  std::size_t repeats = 20;  // timed runs; the median is reported
  std::size_t warmup = 3;    // untimed runs before timing
  std::uint64_t seed = 0;
};

/// Times eval-branched vs merged forward of one layer whose N branches span L
/// (l0 = L / 2^(N-1)). The merged kernel is built once, outside the timing.
BenchRow bench_layer(std::size_t L, std::size_t N, std::size_t D, const BenchOptions& options = {});

/// Header `L,N,D,branched_ms,merged_ms,speedup`, then one line per row.
void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows);

/// Header `branch,channel,t,value`. Each branch kernel is written at its lag
/// in the layer (concat segments start at their offset). With `merged` the
/// merged kernel is written instead, as branch "merged".
void write_kernel_csv(std::ostream& out, const MRConvLayer& layer, bool merged = false);

}  // namespace mrconv
