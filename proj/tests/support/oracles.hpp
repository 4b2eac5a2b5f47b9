#pragma once

// Independent reference computations used only by the tests. Nothing here
// calls into the FFT or convolution engines under test.

#include <cmath>
#include <complex>
#include <cstddef>
#include <functional>
#include <numbers>
#include <random>
#include <vector>

#include "mrconv/tensor.hpp"

namespace oracle {

using Cplx = std::complex<double>;

/// O(n^2) DFT; sign = -1 forward (unnormalised), +1 inverse (scaled by 1/n).
inline std::vector<Cplx> dft(const std::vector<Cplx>& x, int sign) {
  const std::size_t n = x.size();
  std::vector<Cplx> out(n);
  for (std::size_t j = 0; j < n; ++j) {
    Cplx acc{};
    for (std::size_t t = 0; t < n; ++t) {
      const double a = sign * 2.0 * std::numbers::pi * static_cast<double>((j * t) % n) / static_cast<double>(n);
      acc += x[t] * Cplx(std::cos(a), std::sin(a));
    }
    out[j] = sign > 0 ? acc / static_cast<double>(n) : acc;
  }
  return out;
}

/// y[t] = sum_tau k[tau] u[t - tau] for one lane.
inline std::vector<double> causal_conv(const std::vector<double>& u, const std::vector<double>& k) {
  std::vector<double> y(u.size(), 0.0);
  for (std::size_t t = 0; t < u.size(); ++t) {
    for (std::size_t tau = 0; tau < k.size() && tau <= t; ++tau) y[t] += k[tau] * u[t - tau];
  }
  return y;
}

inline mrconv::SeqTensor conv_tensor(const mrconv::SeqTensor& u, const mrconv::Matrix& k) {
  mrconv::SeqTensor y(u.batch(), u.channels(), u.length());
  for (std::size_t b = 0; b < u.batch(); ++b) {
    for (std::size_t d = 0; d < u.channels(); ++d) {
      std::vector<double> lane(u.lane(b, d).begin(), u.lane(b, d).end());
      std::vector<double> kern(k.row(d).begin(), k.row(d).end());
      auto out = causal_conv(lane, kern);
      std::copy(out.begin(), out.end(), y.lane(b, d).begin());
    }
  }
  return y;
}

/// Kernel values from modes by the explicit trigonometric sum over the
/// Hermitian-completed spectrum, evaluated in long double.
inline std::vector<double> fourier_sum(const std::vector<Cplx>& modes, std::size_t len) {
  std::vector<double> out(len);
  for (std::size_t t = 0; t < len; ++t) {
    long double acc = 0.0L;
    for (std::size_t j = 0; j < modes.size(); ++j) {
      const long double th = 2.0L * std::numbers::pi_v<long double> * static_cast<long double>(j * t) / len;
      const long double term = modes[j].real() * std::cos(th) - modes[j].imag() * std::sin(th);
      const bool real_bin = j == 0 || 2 * j == len;
      acc += real_bin ? static_cast<long double>(modes[j].real()) * std::cos(th) : 2.0L * term;
    }
    out[t] = static_cast<double>(acc / len);
  }
  return out;
}

struct Random {
  std::mt19937_64 gen;
  explicit Random(std::uint64_t seed) : gen(seed) {}

  double normal() { return std::normal_distribution<double>(0.0, 1.0)(gen); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(gen); }
  std::size_t index(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(gen);
  }

  std::vector<double> vec(std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = normal();
    return v;
  }
  std::vector<Cplx> cvec(std::size_t n) {
    std::vector<Cplx> v(n);
    for (auto& x : v) x = {normal(), normal()};
    return v;
  }
  mrconv::SeqTensor tensor(std::size_t B, std::size_t D, std::size_t L) {
    return mrconv::SeqTensor(B, D, L, vec(B * D * L));
  }
  mrconv::Matrix matrix(std::size_t r, std::size_t c) { return mrconv::Matrix(r, c, vec(r * c)); }
};

/// Central difference of f around x[i].
inline double central_difference(const std::function<double()>& f, double& x, double h) {
  const double saved = x;
  x = saved + h;
  const double fp = f();
  x = saved - h;
  const double fm = f();
  x = saved;
  return (fp - fm) / (2.0 * h);
}

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace oracle
