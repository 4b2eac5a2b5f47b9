#include "mrconv/fft.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <unordered_map>

#include "mrconv/error.hpp"

namespace mrconv {
namespace {

struct Plan {
  std::vector<std::size_t> bitrev;
  std::vector<Cplx> twiddle;  // exp(-2*pi*i*k/n), k < n/2
  std::vector<Cplx> real_twiddle;  // exp(-2*pi*i*k/(2n)), k <= n; used by the real transforms
};

// Plans are cached per thread so concurrent callers never share mutable state.
const Plan& plan_for(std::size_t n) {
  thread_local std::unordered_map<std::size_t, Plan> cache;
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;

  Plan p;
  p.bitrev.resize(n);
  std::size_t bits = 0;
  while ((std::size_t{1} << bits) < n) ++bits;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t r = 0;
    for (std::size_t b = 0; b < bits; ++b) r |= ((i >> b) & 1U) << (bits - 1 - b);
    p.bitrev[i] = r;
  }
  p.twiddle.resize(n / 2);
  for (std::size_t k = 0; k < n / 2; ++k) {
    const double a = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    p.twiddle[k] = {std::cos(a), std::sin(a)};
  }
  p.real_twiddle.resize(n + 1);
  for (std::size_t k = 0; k <= n; ++k) {
    const double a = -std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    p.real_twiddle[k] = {std::cos(a), std::sin(a)};
  }
  return cache.emplace(n, std::move(p)).first->second;
}

void require_pow2(std::size_t n, const char* where) {
  if (!is_pow2(n)) {
    throw Error(Errc::invalid_length,
                std::string(where) + ": length " + std::to_string(n) + " is not a power of two");
  }
}

std::vector<Cplx>& scratch() {
  thread_local std::vector<Cplx> buf;
  return buf;
}

}  // namespace

bool is_pow2(std::size_t n) noexcept { return n != 0 && (n & (n - 1)) == 0; }

std::size_t next_pow2(std::size_t n) {
  if (n == 0) throw Error(Errc::invalid_length, "next_pow2 of 0");
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

void fft_inplace(std::span<Cplx> x, bool inverse) {
  const std::size_t n = x.size();
  require_pow2(n, "fft");
  if (n == 1) return;
  const Plan& plan = plan_for(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = plan.bitrev[i];
    if (i < r) std::swap(x[i], x[r]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    const std::size_t stride = n / len;
    for (std::size_t start = 0; start < n; start += len) {
      for (std::size_t j = 0; j < half; ++j) {
        const Cplx w = inverse ? std::conj(plan.twiddle[j * stride]) : plan.twiddle[j * stride];
        const Cplx u = x[start + j];
        const Cplx v = x[start + j + half] * w;
        x[start + j] = u + v;
        x[start + j + half] = u - v;
      }
    }
  }
}

std::vector<Cplx> fft(std::span<const Cplx> x) {
  std::vector<Cplx> out(x.begin(), x.end());
  fft_inplace(out, false);
  return out;
}

std::vector<Cplx> ifft(std::span<const Cplx> x) {
  std::vector<Cplx> out(x.begin(), x.end());
  fft_inplace(out, true);
  const double scale = 1.0 / static_cast<double>(out.size());
  for (auto& v : out) v *= scale;
  return out;
}

void rfft_into(std::span<const double> x, std::size_t n, std::span<Cplx> out) {
  require_pow2(n, "rfft");
  if (x.size() > n) throw Error(Errc::invalid_length, "rfft input longer than transform");
  if (out.size() != n / 2 + 1) throw Error(Errc::shape_error, "rfft output must hold n/2+1 bins");
  auto at = [&](std::size_t i) { return i < x.size() ? x[i] : 0.0; };
  if (n == 1) {
    out[0] = at(0);
    return;
  }
  if (n == 2) {
    out[0] = at(0) + at(1);
    out[1] = at(0) - at(1);
    return;
  }
  const std::size_t h = n / 2;
  auto& z = scratch();
  z.resize(h);
  for (std::size_t k = 0; k < h; ++k) z[k] = {at(2 * k), at(2 * k + 1)};
  fft_inplace(std::span<Cplx>(z.data(), h), false);
  const Plan& half_plan = plan_for(h);
  for (std::size_t k = 0; k <= h; ++k) {
    const Cplx zk = z[k % h];
    const Cplx znk = std::conj(z[(h - k) % h]);
    const Cplx even = 0.5 * (zk + znk);
    const Cplx odd = Cplx(0.0, -0.5) * (zk - znk);
    out[k] = even + half_plan.real_twiddle[k] * odd;
  }
  out[0] = out[0].real();
  out[h] = out[h].real();
}

void irfft_into(std::span<const Cplx> spectrum, std::size_t n, std::span<double> out) {
  require_pow2(n, "irfft");
  if (spectrum.size() != n / 2 + 1) throw Error(Errc::shape_error, "irfft expects n/2+1 bins");
  if (out.size() > n) throw Error(Errc::invalid_length, "irfft output longer than transform");
  if (n == 1) {
    if (!out.empty()) out[0] = spectrum[0].real();
    return;
  }
  if (n == 2) {
    const double a = spectrum[0].real();
    const double b = spectrum[1].real();
    if (!out.empty()) out[0] = 0.5 * (a + b);
    if (out.size() > 1) out[1] = 0.5 * (a - b);
    return;
  }
  const std::size_t h = n / 2;
  auto bin = [&](std::size_t k) {
    return (k == 0 || k == h) ? Cplx(spectrum[k].real(), 0.0) : spectrum[k];
  };
  auto& z = scratch();
  z.resize(h);
  const Plan& half_plan = plan_for(h);
  for (std::size_t k = 0; k < h; ++k) {
    const Cplx xk = bin(k);
    const Cplx xnk = std::conj(bin(h - k));
    const Cplx even = 0.5 * (xk + xnk);
    const Cplx odd = 0.5 * (xk - xnk) * std::conj(half_plan.real_twiddle[k]);
    z[k] = even + Cplx(0.0, 1.0) * odd;
  }
  fft_inplace(std::span<Cplx>(z.data(), h), true);
  const double scale = 1.0 / static_cast<double>(h);
  for (std::size_t j = 0; j < out.size(); ++j) {
    const Cplx v = z[j / 2];
    out[j] = scale * ((j % 2 == 0) ? v.real() : v.imag());
  }
}

std::vector<Cplx> rfft(std::span<const double> x) {
  const std::size_t n = x.size();
  require_pow2(n, "rfft");
  std::vector<Cplx> out(n / 2 + 1);
  rfft_into(x, n, out);
  return out;
}

std::vector<double> irfft(std::span<const Cplx> spectrum, std::size_t n) {
  require_pow2(n, "irfft");
  if (spectrum.size() != n / 2 + 1) {
    throw Error(Errc::invalid_spectrum, "irfft of length " + std::to_string(n) + " needs " +
                                            std::to_string(n / 2 + 1) + " bins");
  }
  for (std::size_t k : {std::size_t{0}, n / 2}) {
    const double im = spectrum[k].imag();
    if (std::abs(im) > 1e-12 * (1.0 + std::abs(spectrum[k]))) {
      throw Error(Errc::invalid_spectrum,
                  "bin " + std::to_string(k) + " must be real for a real signal");
    }
  }
  std::vector<double> out(n);
  irfft_into(spectrum, n, out);
  return out;
}

}  // namespace mrconv
