#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace mrconv {

/// Outcome of one property suite. `value` is the worst observed error (or
/// the checked quantity) and passes when it is below `threshold`.
struct SuiteResult {
  std::string name;
  bool passed = false;
  double value = 0.0;
  double threshold = 0.0;
  std::string detail;
  double seconds = 0.0;
};

/// Branched-eval vs merged forward over random layers (N 1..6, D in {1,8,64},
/// l0 in {2,4,8}, every kernel kind, random eval-mode BN statistics, both
/// merge styles, some bidirectional). Max relative divergence < 1e-6.
SuiteResult verify_merge_equivalence(std::uint64_t seed, std::size_t configs = 100);

/// FFT vs direct engine on random (u, k) pairs with L up to max_len.
/// Max relative error < 1e-9.
SuiteResult verify_conv_engines(std::uint64_t seed, std::size_t pairs = 1000, std::size_t max_len = 8192);

/// conv -> eval BN against the folded kernel and bias. Error < 1e-10.
SuiteResult verify_bn_fold(std::uint64_t seed, std::size_t instances = 100);

/// Central finite differences (h = 1e-5) against tape gradients for every
/// parameter class of depth-2 models covering all kernel kinds, both norms,
/// pre/post norm, bidirectional and concat layers. `per_class` entries are
/// sampled per class. Max relative error < 1e-4.
SuiteResult verify_gradients(std::uint64_t seed, std::size_t per_class = 50);

/// materialize_fourier against basis_expand (< 1e-10) and a strictly
/// decreasing SSM-kernel error over S = 9, 17, 33.
SuiteResult verify_ssm_bridge(std::uint64_t seed);

/// num_resolutions(1024, 16) == 7 with branch lengths 16..1024.
SuiteResult verify_resolution_law();

/// All suites in order: resolution law, conv engines, bn fold, merge
/// equivalence, gradients, ssm bridge. `on_result` sees each as it finishes.
std::vector<SuiteResult> run_verify_suite(std::uint64_t seed,
                                          const std::function<void(const SuiteResult&)>& on_result = {});

}  // namespace mrconv
