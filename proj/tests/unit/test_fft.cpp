#include <cmath>

#include "doctest.h"
#include "mrconv/error.hpp"
#include "mrconv/fft.hpp"
#include "oracles.hpp"

using namespace mrconv;

namespace {

double max_err(const std::vector<Cplx>& a, const std::vector<Cplx>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("fft of a delta is flat and of a constant is DC only") {
  std::vector<Cplx> delta{1, 0, 0, 0};
  auto d = fft(delta);
  for (auto v : d) CHECK(std::abs(v - Cplx(1, 0)) < 1e-15);

  std::vector<Cplx> ones{1, 1, 1, 1};
  auto c = fft(ones);
  CHECK(std::abs(c[0] - Cplx(4, 0)) < 1e-15);
  for (std::size_t j = 1; j < 4; ++j) CHECK(std::abs(c[j]) < 1e-15);
}

TEST_CASE("fft matches the direct DFT sum on random input") {
  oracle::Random rng(1);
  auto x = rng.cvec(64);
  CHECK(max_err(fft(x), oracle::dft(x, -1)) < 1e-12);
}

TEST_CASE("ifft inverts known spectra") {
  std::vector<Cplx> dc{4, 0, 0, 0};
  for (auto v : ifft(dc)) CHECK(std::abs(v - Cplx(1, 0)) < 1e-15);

  std::vector<Cplx> alt{0, 1, 0, 1};
  CHECK(max_err(ifft(alt), oracle::dft(alt, +1)) < 1e-15);

  oracle::Random rng(2);
  auto x = rng.cvec(128);
  CHECK(max_err(ifft(fft(x)), x) < 1e-12);
}

TEST_CASE("non power-of-two lengths are rejected") {
  std::vector<Cplx> x(6);
  CHECK_THROWS_AS(fft(x), Error);
  try {
    ifft(x);
  } catch (const Error& e) {
    CHECK(e.code() == Errc::invalid_length);
  }
  std::vector<double> r(12);
  CHECK_THROWS_AS(rfft(r), Error);
}

TEST_CASE("rfft returns the leading half of the complex spectrum") {
  std::vector<double> delta{1, 0, 0, 0};
  auto d = rfft(delta);
  REQUIRE(d.size() == 3);
  for (auto v : d) CHECK(std::abs(v - Cplx(1, 0)) < 1e-15);

  std::vector<double> nyq{1, -1, 1, -1};
  auto n = rfft(nyq);
  CHECK(std::abs(n[0]) < 1e-15);
  CHECK(std::abs(n[1]) < 1e-15);
  CHECK(std::abs(n[2] - Cplx(4, 0)) < 1e-15);

  oracle::Random rng(3);
  for (std::size_t len : {1u, 2u, 4u, 8u, 32u, 256u}) {
    auto x = rng.vec(len);
    std::vector<Cplx> cx(x.begin(), x.end());
    auto full = oracle::dft(cx, -1);
    auto half = rfft(x);
    for (std::size_t j = 0; j <= len / 2; ++j) CHECK(std::abs(half[j] - full[j]) < 1e-11);
  }
}

TEST_CASE("irfft validates DC and Nyquist bins") {
  std::vector<Cplx> bad{Cplx(1, 0.5), 0, 0};
  try {
    irfft(bad, 4);
    FAIL("expected InvalidSpectrum");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::invalid_spectrum);
  }
  std::vector<Cplx> bad_nyq{1, 0, Cplx(0, 1)};
  CHECK_THROWS_AS(irfft(bad_nyq, 4), Error);
}

TEST_CASE("roundtrip identity for every power of two up to 4096") {
  oracle::Random rng(4);
  for (std::size_t n = 1; n <= 4096; n *= 2) {
    auto x = rng.cvec(n);
    CHECK(max_err(ifft(fft(x)), x) < 1e-12);
    auto r = rng.vec(n);
    auto back = irfft(rfft(r), n);
    CHECK(max_abs_diff(back, r) < 1e-12);
  }
}

TEST_CASE("fft is linear") {
  oracle::Random rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = std::size_t{1} << rng.index(0, 10);
    auto x = rng.cvec(n);
    auto y = rng.cvec(n);
    const Cplx a(rng.normal(), rng.normal());
    const Cplx b(rng.normal(), rng.normal());
    std::vector<Cplx> combo(n);
    for (std::size_t i = 0; i < n; ++i) combo[i] = a * x[i] + b * y[i];
    auto lhs = fft(combo);
    auto fx = fft(x);
    auto fy = fft(y);
    double scale = 0.0;
    double err = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const Cplx rhs = a * fx[i] + b * fy[i];
      err = std::max(err, std::abs(lhs[i] - rhs));
      scale = std::max(scale, std::abs(rhs));
    }
    CHECK(err <= 1e-12 * std::max(1.0, scale));
  }
}

TEST_CASE("Parseval holds") {
  oracle::Random rng(6);
  for (std::size_t n = 1; n <= 4096; n *= 4) {
    auto x = rng.cvec(n);
    double time = 0.0;
    for (auto v : x) time += std::norm(v);
    double freq = 0.0;
    for (auto v : fft(x)) freq += std::norm(v);
    freq /= static_cast<double>(n);
    CHECK(std::abs(time - freq) <= 1e-10 * time);
  }
}

TEST_CASE("next_pow2 and zero_pad") {
  CHECK(next_pow2(1) == 1);
  CHECK(next_pow2(1025) == 2048);
  CHECK(next_pow2(4096) == 4096);
  CHECK_THROWS_AS(next_pow2(0), Error);

  CHECK(zero_pad(std::vector<double>{1, 2}, 0, 2) == std::vector<double>{1, 2, 0, 0});
  CHECK(zero_pad(std::vector<double>{5}, 1, 0) == std::vector<double>{0, 5});
  CHECK(zero_pad(std::vector<double>{1, 2, 3}, 0, 0) == std::vector<double>{1, 2, 3});
}
