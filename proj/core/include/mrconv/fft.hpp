#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace mrconv {

using Cplx = std::complex<double>;

/// Smallest power of two >= n. Throws InvalidLength for n == 0.
std::size_t next_pow2(std::size_t n);
bool is_pow2(std::size_t n) noexcept;

// Radix-2 transforms. Forward is unnormalized, inverse carries the 1/n factor.
// All lengths must be powers of two (InvalidLength otherwise).

std::vector<Cplx> fft(std::span<const Cplx> x);
std::vector<Cplx> ifft(std::span<const Cplx> x);

/// In-place unnormalized transform; `inverse` flips the twiddle sign only.
void fft_inplace(std::span<Cplx> x, bool inverse);

/// First n/2+1 bins of fft(x) for real x.
std::vector<Cplx> rfft(std::span<const double> x);

/// Real signal of length n from its half spectrum (n/2+1 bins) using Hermitian
/// completion. DC and Nyquist bins must be real (InvalidSpectrum otherwise).
std::vector<double> irfft(std::span<const Cplx> spectrum, std::size_t n);

/// rfft of `x` zero-extended to length n into `out` (n/2+1 bins). x.size() <= n.
void rfft_into(std::span<const double> x, std::size_t n, std::span<Cplx> out);

/// irfft into `out` (length <= n, the leading samples are written). The
/// spectrum's DC/Nyquist imaginary parts are ignored; no validation.
void irfft_into(std::span<const Cplx> spectrum, std::size_t n, std::span<double> out);

template <class T>
std::vector<T> zero_pad(std::span<const T> x, std::size_t left, std::size_t right) {
  std::vector<T> out(left + x.size() + right, T{});
  for (std::size_t i = 0; i < x.size(); ++i) out[left + i] = x[i];
  return out;
}

template <class T>
std::vector<T> zero_pad(const std::vector<T>& x, std::size_t left, std::size_t right) {
  return zero_pad(std::span<const T>(x), left, right);
}

}  // namespace mrconv
