#include "mrconv/ssmbridge.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <string>

#include "mrconv/error.hpp"

namespace mrconv {

FourierSSM build_fourier_ssm(std::size_t S) {
  if (S == 0) throw Error(Errc::invalid_length, "state size must be at least 1");
  constexpr double r2 = std::numbers::sqrt2;
  constexpr double tau = 2.0 * std::numbers::pi;
  FourierSSM ssm{Matrix(S, S), std::vector<double>(S, 0.0), std::vector<double>(S, 0.0)};
  for (std::size_t n = 0; n < S; ++n) {
    const bool n_odd = n % 2 == 1;
    ssm.B[n] = n == 0 ? 2.0 : (n_odd ? 2.0 * r2 : 0.0);
    for (std::size_t k = 0; k < S; ++k) {
      const bool k_odd = k % 2 == 1;
      double a = 0.0;
      if (n == 0 && k == 0) a = -2.0;
      else if (n == 0 && k_odd) a = -2.0 * r2;
      else if (k == 0 && n_odd) a = -2.0 * r2;
      else if (n_odd && k_odd) a = -4.0;
      else if (n == k + 1 && k_odd) a = tau * double(basis_frequency(k));
      else if (k == n + 1 && n_odd) a = -tau * double(basis_frequency(n));
      ssm.A(n, k) = a;
    }
  }
  return ssm;
}

double basis_function(std::size_t n, double t) noexcept {
  if (n == 0) return 1.0;
  const double w = 2.0 * std::numbers::pi * double(basis_frequency(n)) * t;
  return std::numbers::sqrt2 * (n % 2 == 1 ? std::cos(w) : std::sin(w));
}

std::vector<double> basis_expand(std::span<const double> coeffs, std::size_t length) {
  std::vector<double> k(length, 0.0);
  for (std::size_t t = 0; t < length; ++t) {
    const double x = double(t) / double(length);
    for (std::size_t n = 0; n < coeffs.size(); ++n)
      if (coeffs[n] != 0.0) k[t] += coeffs[n] * basis_function(n, x);
  }
  return k;
}

std::vector<double> fourier_to_basis(const FourierKernel& k, std::size_t d) {
  const std::size_t m = k.modes_per_channel();
  const std::size_t L = k.declared_len();
  std::vector<double> c(2 * m - 1, 0.0);
  c[0] = k.mode(d, 0).real() / double(L);
  for (std::size_t j = 1; j < m; ++j) {
    // Interior bins appear twice in the Hermitian completion; Nyquist once.
    const double w = FourierKernel::real_bin(j, L) ? 1.0 : 2.0;
    c[2 * j - 1] = w * k.mode(d, j).real() / (double(L) * std::numbers::sqrt2);
    c[2 * j] = FourierKernel::real_bin(j, L) ? 0.0 : -w * k.mode(d, j).imag() / (double(L) * std::numbers::sqrt2);
  }
  return c;
}

std::vector<double> ssm_kernel_continuous(const FourierSSM& ssm, std::size_t length, std::size_t steps) {
  const std::size_t S = ssm.state_size();
  if (steps < 8) throw Error(Errc::invalid_length, "bilinear integration needs at least 8 substeps per sample");
  if (length == 0) throw Error(Errc::invalid_length, "kernel length must be positive");
  if (ssm.A.rows() != S || ssm.A.cols() != S || ssm.C.size() != S)
    throw Error(Errc::shape_error, "SSM matrices disagree on the state size");
  using Mat = Eigen::MatrixXd;
  using Vec = Eigen::VectorXd;
  const Mat A = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      ssm.A.data().data(), S, S);
  const double h = 1.0 / double(length * steps);
  const Mat I = Mat::Identity(S, S);
  // One substep: x <- (I - hA/2)^{-1} (I + hA/2) x.
  const Mat step = (I - 0.5 * h * A).partialPivLu().solve(I + 0.5 * h * A);
  Vec x = Eigen::Map<const Vec>(ssm.B.data(), S);
  const Vec C = Eigen::Map<const Vec>(ssm.C.data(), S);
  const double limit = 1e12 * (1.0 + x.norm());
  std::vector<double> k(length);
  for (std::size_t j = 0; j < length; ++j) {
    k[j] = C.dot(x);
    for (std::size_t s = 0; s < steps; ++s) x = step * x;
    const double norm = x.norm();
    if (!std::isfinite(norm) || norm > limit)
      throw Error(Errc::integration_unstable, "state norm diverged at sample " + std::to_string(j + 1));
  }
  return k;
}

double ssm_bridge_error(std::span<const double> coeffs, std::size_t S, std::size_t length, std::size_t steps) {
  FourierSSM ssm = build_fourier_ssm(S);
  const std::size_t n = std::min(S, coeffs.size());
  std::copy(coeffs.begin(), coeffs.begin() + n, ssm.C.begin());
  const auto k = ssm_kernel_continuous(ssm, length, steps);
  const auto target = basis_expand(coeffs.first(n), length);
  double num = 0.0, den = 0.0;
  for (std::size_t t = 0; t < length; ++t) {
    num += (k[t] - target[t]) * (k[t] - target[t]);
    den += target[t] * target[t];
  }
  return std::sqrt(num / den);
}

}  // namespace mrconv
