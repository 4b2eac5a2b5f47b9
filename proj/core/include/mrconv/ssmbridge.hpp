#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mrconv/kernels.hpp"
#include "mrconv/tensor.hpp"

namespace mrconv {

/// Continuous-time system whose impulse response approaches a truncated
/// Fourier series on [0, 1) as the state grows. State order is
/// [1, c_1, s_1, c_2, s_2, ...]: odd indices are cosines, even ones sines.
struct FourierSSM {
  Matrix A;
  std::vector<double> B;
  std::vector<double> C;

  std::size_t state_size() const noexcept { return B.size(); }
};

/// A and B for state size S (C is zero). Rotation entries couple c_m and s_m
/// with frequency m = (index + 1) / 2.
FourierSSM build_fourier_ssm(std::size_t state_size);

/// Frequency of state index n: 0 for the constant, (n + 1) / 2 otherwise.
constexpr std::size_t basis_frequency(std::size_t n) noexcept { return (n + 1) / 2; }

/// Basis function n of [1, sqrt2 cos(2 pi m t), sqrt2 sin(2 pi m t), ...] at t.
double basis_function(std::size_t n, double t) noexcept;

/// k[t] = sum_n coeffs[n] * p_n(t / L), t = 0..L-1.
std::vector<double> basis_expand(std::span<const double> coeffs, std::size_t length);

/// Coefficients (2m - 1 entries) for which basis_expand reproduces channel d
/// of materialize_fourier(k).
std::vector<double> fourier_to_basis(const FourierKernel& k, std::size_t channel);

/// K(j / L) = C exp(A j / L) B for j = 0..L-1, integrated with the bilinear
/// (trapezoidal) rule using `steps_per_sample` substeps per sample (>= 8).
/// Throws IntegrationUnstable when the state norm blows up.
std::vector<double> ssm_kernel_continuous(const FourierSSM& ssm, std::size_t length,
                                          std::size_t steps_per_sample = 8);

/// Relative L2 error of the SSM kernel of size S against basis_expand of
/// the first min(S, coeffs.size()) coefficients.
double ssm_bridge_error(std::span<const double> coeffs, std::size_t state_size, std::size_t length,
                        std::size_t steps_per_sample = 8);

}  // namespace mrconv
