#include "mrconv/conv.hpp"

#include <algorithm>
#include <string>
#include <vector>

#include "mrconv/error.hpp"
#include "mrconv/fft.hpp"

namespace mrconv {
namespace {

void check_shapes(const SeqTensor& u, const Matrix& k) {
  if (k.rows() != u.channels()) {
    throw Error(Errc::shape_error, "kernel has " + std::to_string(k.rows()) + " rows for " +
                                       std::to_string(u.channels()) + " channels");
  }
  if (k.cols() == 0) throw Error(Errc::shape_error, "empty kernel");
  if (k.cols() > u.length()) {
    throw Error(Errc::kernel_too_long, "kernel length " + std::to_string(k.cols()) +
                                           " exceeds sequence length " + std::to_string(u.length()));
  }
}

}  // namespace

void causal_conv_lane_direct(std::span<const double> u, std::span<const double> k,
                             std::span<double> y) {
  const std::size_t L = u.size();
  const std::size_t Lk = k.size();
  for (std::size_t t = 0; t < L; ++t) {
    double acc = 0.0;
    const std::size_t last = std::min(t, Lk - 1);
    for (std::size_t tau = 0; tau <= last; ++tau) acc += k[tau] * u[t - tau];
    y[t] = acc;
  }
}

void causal_conv_lane_fft(std::span<const double> u, std::span<const double> k,
                          std::span<double> y) {
  const std::size_t n = next_pow2(u.size() + k.size() - 1);
  thread_local std::vector<Cplx> us;
  thread_local std::vector<Cplx> ks;
  us.resize(n / 2 + 1);
  ks.resize(n / 2 + 1);
  rfft_into(u, n, us);
  rfft_into(k, n, ks);
  for (std::size_t j = 0; j < us.size(); ++j) us[j] *= ks[j];
  irfft_into(us, n, y.first(u.size()));
}

SeqTensor causal_conv_direct(const SeqTensor& u, const Matrix& k) {
  check_shapes(u, k);
  SeqTensor y(u.batch(), u.channels(), u.length());
  for (std::size_t b = 0; b < u.batch(); ++b) {
    for (std::size_t d = 0; d < u.channels(); ++d) causal_conv_lane_direct(u.lane(b, d), k.row(d), y.lane(b, d));
  }
  return y;
}

SeqTensor causal_conv_fft(const SeqTensor& u, const Matrix& k) {
  check_shapes(u, k);
  SeqTensor y(u.batch(), u.channels(), u.length());
  const std::size_t n = next_pow2(u.length() + k.cols() - 1);
  const std::size_t bins = n / 2 + 1;
  // One kernel spectrum per channel, reused across the batch.
  std::vector<Cplx> kspec(k.rows() * bins);
  for (std::size_t d = 0; d < k.rows(); ++d) {
    rfft_into(k.row(d), n, std::span<Cplx>(kspec).subspan(d * bins, bins));
  }
  std::vector<Cplx> work(bins);
  for (std::size_t b = 0; b < u.batch(); ++b) {
    for (std::size_t d = 0; d < u.channels(); ++d) {
      rfft_into(u.lane(b, d), n, work);
      const Cplx* kd = kspec.data() + d * bins;
      for (std::size_t j = 0; j < bins; ++j) work[j] *= kd[j];
      irfft_into(work, n, y.lane(b, d));
    }
  }
  return y;
}

SeqTensor causal_conv(const SeqTensor& u, const Matrix& k, ConvEngine engine) {
  return engine.use_fft(k.cols()) ? causal_conv_fft(u, k) : causal_conv_direct(u, k);
}

SeqTensor dilated_conv_direct(const SeqTensor& u, const DilatedKernel& k) {
  if (k.channels() != u.channels()) throw Error(Errc::shape_error, "dilated kernel channel mismatch");
  if (k.declared_len() > u.length()) {
    throw Error(Errc::kernel_too_long, "dilated kernel longer than the sequence");
  }
  SeqTensor y(u.batch(), u.channels(), u.length());
  const std::size_t L = u.length();
  for (std::size_t b = 0; b < u.batch(); ++b) {
    for (std::size_t d = 0; d < u.channels(); ++d) {
      auto in = u.lane(b, d);
      auto out = y.lane(b, d);
      for (std::size_t t = 0; t < L; ++t) {
        double acc = 0.0;
        for (std::size_t j = 0; j < k.taps(); ++j) {
          const std::size_t lag = j * k.dilation();
          if (lag > t) break;
          acc += k.weights()(d, j) * in[t - lag];
        }
        out[t] = acc;
      }
    }
  }
  return y;
}

SeqTensor reverse_time(const SeqTensor& u) {
  SeqTensor r(u.batch(), u.channels(), u.length());
  for (std::size_t b = 0; b < u.batch(); ++b) {
    for (std::size_t d = 0; d < u.channels(); ++d) {
      auto in = u.lane(b, d);
      auto out = r.lane(b, d);
      std::reverse_copy(in.begin(), in.end(), out.begin());
    }
  }
  return r;
}

SeqTensor bidirectional_conv(const SeqTensor& u, const Matrix& k_fwd, const Matrix& k_bwd,
                             ConvEngine engine) {
  SeqTensor y = causal_conv(u, k_fwd, engine);
  const SeqTensor back = reverse_time(causal_conv(reverse_time(u), k_bwd, engine));
  auto yd = y.data();
  auto bd = back.data();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] += bd[i];
  return y;
}

}  // namespace mrconv
