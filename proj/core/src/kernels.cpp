#include "mrconv/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <string>

#include "mrconv/error.hpp"
#include "mrconv/rng.hpp"

namespace mrconv {

std::string_view to_string(KernelKind kind) noexcept {
  switch (kind) {
    case KernelKind::dense: return "dense";
    case KernelKind::dilated: return "dilated";
    case KernelKind::fourier: return "fourier";
    case KernelKind::sparse: return "sparse";
    case KernelKind::fourier_sparse: return "fourier_sparse";
  }
  return "unknown";
}

KernelKind parse_kernel_kind(std::string_view name) {
  for (auto k : {KernelKind::dense, KernelKind::dilated, KernelKind::fourier, KernelKind::sparse,
                 KernelKind::fourier_sparse}) {
    if (name == to_string(k)) return k;
  }
  if (name == "fourier+sparse") return KernelKind::fourier_sparse;
  throw Error(Errc::config_error, "unknown kernel kind '" + std::string(name) + "'");
}

DilatedKernel::DilatedKernel(Matrix weights, std::size_t dilation, std::size_t declared_len)
    : weights_(std::move(weights)), dilation_(dilation), declared_len_(declared_len) {
  if (weights_.rows() == 0 || weights_.cols() == 0) {
    throw Error(Errc::shape_error, "dilated kernel needs at least one channel and one tap");
  }
  if (dilation_ == 0) throw Error(Errc::invalid_resolution, "dilation must be positive");
  if (declared_len_ == 0) declared_len_ = span();
  if (declared_len_ < span()) {
    throw Error(Errc::invalid_length, "declared length " + std::to_string(declared_len_) +
                                          " shorter than the tap span " + std::to_string(span()));
  }
}

FourierKernel::FourierKernel(std::size_t channels, std::size_t declared_len, std::vector<Cplx> modes)
    : channels_(channels), declared_len_(declared_len), modes_(std::move(modes)) {
  if (channels_ == 0 || declared_len_ == 0 || modes_.empty() || modes_.size() % channels_ != 0) {
    throw Error(Errc::shape_error, "fourier kernel needs channels * m modes with m >= 1");
  }
  const std::size_t m = modes_per_channel();
  if (m > declared_len_ / 2 + 1) {
    throw Error(Errc::invalid_spectrum, std::to_string(m) + " modes exceed the band limit of a length-" +
                                            std::to_string(declared_len_) + " kernel");
  }
  for (std::size_t d = 0; d < channels_; ++d) {
    for (std::size_t j = 0; j < m; ++j) {
      if (real_bin(j, declared_len_) && modes_[d * m + j].imag() != 0.0) {
        throw Error(Errc::invalid_spectrum, "DC/Nyquist mode must be real (channel " +
                                                std::to_string(d) + ")");
      }
    }
  }
}

std::span<double> FourierKernel::as_reals() noexcept {
  return {reinterpret_cast<double*>(modes_.data()), 2 * modes_.size()};
}

std::span<const double> FourierKernel::as_reals() const noexcept {
  return {reinterpret_cast<const double*>(modes_.data()), 2 * modes_.size()};
}

FourierKernel FourierKernel::resampled(std::size_t new_len) const {
  const std::size_t m = modes_per_channel();
  const std::size_t keep = std::min(m, new_len / 2 + 1);
  std::vector<Cplx> out(channels_ * keep);
  for (std::size_t d = 0; d < channels_; ++d) {
    for (std::size_t j = 0; j < keep; ++j) {
      Cplx c = mode(d, j);
      if (real_bin(j, new_len)) c = c.real();
      out[d * keep + j] = c;
    }
  }
  return FourierKernel(channels_, new_len, std::move(out));
}

SparseKernel::SparseKernel(std::size_t channels, std::size_t declared_len,
                           std::vector<std::size_t> positions, std::vector<double> values)
    : channels_(channels),
      declared_len_(declared_len),
      positions_(std::move(positions)),
      values_(std::move(values)) {
  if (channels_ == 0 || values_.empty() || values_.size() % channels_ != 0 ||
      positions_.size() != values_.size()) {
    throw Error(Errc::invalid_sparsity, "sparse kernel needs s >= 1 positions and values per channel");
  }
  const std::size_t s = nonzeros_per_channel();
  for (std::size_t d = 0; d < channels_; ++d) {
    for (std::size_t i = 0; i < s; ++i) {
      const std::size_t p = positions_[d * s + i];
      if (p >= declared_len_ || (i > 0 && p <= positions_[d * s + i - 1])) {
        throw Error(Errc::invalid_sparsity,
                    "positions must be strictly increasing and below the declared length");
      }
    }
  }
}

FourierSparseKernel::FourierSparseKernel(FourierKernel f, SparseKernel s, std::vector<double> scale_f,
                                         std::vector<double> scale_s)
    : fourier(std::move(f)),
      sparse(std::move(s)),
      scale_fourier(std::move(scale_f)),
      scale_sparse(std::move(scale_s)) {
  if (fourier.declared_len() != sparse.declared_len() || fourier.channels() != sparse.channels() ||
      scale_fourier.size() != fourier.channels() || scale_sparse.size() != fourier.channels()) {
    throw Error(Errc::shape_error, "fourier+sparse parts must share length and channel count");
  }
}

KernelKind kind_of(const KernelParam& k) noexcept {
  return static_cast<KernelKind>(k.index());
}

std::size_t declared_len(const KernelParam& k) noexcept {
  return std::visit([](const auto& v) { return v.declared_len(); }, k);
}

std::size_t channels(const KernelParam& k) noexcept {
  return std::visit([](const auto& v) { return v.channels(); }, k);
}

std::size_t parameters_per_channel(const KernelParam& k) noexcept {
  struct Count {
    std::size_t operator()(const DenseKernel& v) const { return v.weights.cols(); }
    std::size_t operator()(const DilatedKernel& v) const { return v.taps(); }
    std::size_t operator()(const FourierKernel& v) const { return 2 * v.modes_per_channel(); }
    std::size_t operator()(const SparseKernel& v) const { return v.nonzeros_per_channel(); }
    std::size_t operator()(const FourierSparseKernel& v) const {
      return 2 * v.fourier.modes_per_channel() + v.sparse.nonzeros_per_channel() + 2;
    }
  };
  return std::visit(Count{}, k);
}

void fourier_render(std::span<const Cplx> modes, std::span<double> out) {
  const std::size_t len = out.size();
  const std::size_t m = modes.size();
  if (m > len / 2 + 1) throw Error(Errc::invalid_spectrum, "too many modes for kernel length");
  if (is_pow2(len)) {
    thread_local std::vector<Cplx> spec;
    spec.assign(len / 2 + 1, Cplx{});
    std::copy(modes.begin(), modes.end(), spec.begin());
    irfft_into(spec, len, out);
    return;
  }
  // Direct trigonometric sum for lengths without a radix-2 transform.
  const double inv = 1.0 / static_cast<double>(len);
  for (std::size_t t = 0; t < len; ++t) {
    double acc = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double theta = 2.0 * std::numbers::pi * static_cast<double>((j * t) % len) * inv;
      if (FourierKernel::real_bin(j, len)) {
        acc += modes[j].real() * std::cos(theta);
      } else {
        acc += 2.0 * (modes[j].real() * std::cos(theta) - modes[j].imag() * std::sin(theta));
      }
    }
    out[t] = acc * inv;
  }
}

void fourier_render_adjoint(std::span<const double> grad_out, std::span<Cplx> grad_modes) {
  const std::size_t len = grad_out.size();
  const std::size_t m = grad_modes.size();
  const double inv = 1.0 / static_cast<double>(len);
  if (is_pow2(len)) {
    thread_local std::vector<Cplx> spec;
    spec.resize(len / 2 + 1);
    rfft_into(grad_out, len, spec);
    for (std::size_t j = 0; j < m; ++j) {
      if (FourierKernel::real_bin(j, len)) {
        grad_modes[j] = Cplx(spec[j].real() * inv, 0.0);
      } else {
        grad_modes[j] = 2.0 * inv * spec[j];
      }
    }
    return;
  }
  for (std::size_t j = 0; j < m; ++j) {
    double re = 0.0;
    double im = 0.0;
    for (std::size_t t = 0; t < len; ++t) {
      const double theta = 2.0 * std::numbers::pi * static_cast<double>((j * t) % len) * inv;
      re += grad_out[t] * std::cos(theta);
      im -= grad_out[t] * std::sin(theta);
    }
    const double w = FourierKernel::real_bin(j, len) ? 1.0 : 2.0;
    grad_modes[j] = FourierKernel::real_bin(j, len) ? Cplx(re * inv, 0.0) : Cplx(w * re * inv, w * im * inv);
  }
}

Matrix materialize_dilated(const DilatedKernel& k) {
  Matrix out(k.channels(), k.declared_len());
  for (std::size_t d = 0; d < k.channels(); ++d) {
    for (std::size_t j = 0; j < k.taps(); ++j) out(d, j * k.dilation()) = k.weights()(d, j);
  }
  return out;
}

Matrix materialize_fourier(const FourierKernel& k) {
  Matrix out(k.channels(), k.declared_len());
  const std::size_t m = k.modes_per_channel();
  for (std::size_t d = 0; d < k.channels(); ++d) {
    fourier_render(k.modes().subspan(d * m, m), out.row(d));
  }
  return out;
}

Matrix materialize_sparse(const SparseKernel& k) {
  Matrix out(k.channels(), k.declared_len());
  const std::size_t s = k.nonzeros_per_channel();
  for (std::size_t d = 0; d < k.channels(); ++d) {
    for (std::size_t i = 0; i < s; ++i) out(d, k.positions()[d * s + i]) = k.values()[d * s + i];
  }
  return out;
}

Matrix combine_linear_rescale(const Matrix& k0, const Matrix& k1, std::span<const double> scale0,
                              std::span<const double> scale1) {
  if (k0.rows() != k1.rows() || k0.cols() != k1.cols()) {
    throw Error(Errc::shape_error, "linear rescaling merges kernels of equal shape only");
  }
  if (scale0.size() != k0.rows() || scale1.size() != k0.rows()) {
    throw Error(Errc::shape_error, "one rescaling factor per channel expected");
  }
  Matrix out(k0.rows(), k0.cols());
  for (std::size_t d = 0; d < k0.rows(); ++d) {
    for (std::size_t t = 0; t < k0.cols(); ++t) out(d, t) = scale0[d] * k0(d, t) + scale1[d] * k1(d, t);
  }
  return out;
}

Matrix materialize(const KernelParam& k) {
  struct Render {
    Matrix operator()(const DenseKernel& v) const { return v.weights; }
    Matrix operator()(const DilatedKernel& v) const { return materialize_dilated(v); }
    Matrix operator()(const FourierKernel& v) const { return materialize_fourier(v); }
    Matrix operator()(const SparseKernel& v) const { return materialize_sparse(v); }
    Matrix operator()(const FourierSparseKernel& v) const {
      return combine_linear_rescale(materialize_fourier(v.fourier), materialize_sparse(v.sparse),
                                    v.scale_fourier, v.scale_sparse);
    }
  };
  return std::visit(Render{}, k);
}

std::vector<std::size_t> sample_sparse_positions(std::uint64_t seed, std::size_t count,
                                                 std::size_t length) {
  if (count == 0 || count > length) {
    throw Error(Errc::invalid_sparsity, "cannot sample " + std::to_string(count) +
                                            " positions from length " + std::to_string(length));
  }
  // Floyd's algorithm: exactly `count` draws, uniform over all subsets.
  CounterRng rng(seed, stream_id("sparse-positions"));
  std::set<std::size_t> chosen;
  for (std::size_t j = length - count; j < length; ++j) {
    const std::size_t t = rng.below(j + 1);
    if (!chosen.insert(t).second) chosen.insert(j);
  }
  return {chosen.begin(), chosen.end()};
}

std::size_t fourier_modes_for(std::size_t base_len, std::size_t declared_len) noexcept {
  return std::min(base_len, declared_len / 2 + 1);
}

namespace {

Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev, CounterRng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = stddev * rng.normal();
  return m;
}

FourierKernel init_fourier(std::size_t channels, std::size_t len, std::size_t base, double stddev,
                           CounterRng& rng) {
  const std::size_t m = fourier_modes_for(base, len);
  std::vector<Cplx> modes(channels * m);
  for (std::size_t d = 0; d < channels; ++d) {
    for (std::size_t j = 0; j < m; ++j) {
      const double re = stddev * rng.normal();
      const double im = stddev * rng.normal();
      modes[d * m + j] = FourierKernel::real_bin(j, len) ? Cplx(re, 0.0) : Cplx(re, im);
    }
  }
  return FourierKernel(channels, len, std::move(modes));
}

SparseKernel init_sparse(std::size_t channels, std::size_t len, std::size_t base, double stddev,
                         std::uint64_t seed, CounterRng& rng) {
  std::vector<std::size_t> positions;
  std::vector<double> values;
  positions.reserve(channels * base);
  for (std::size_t d = 0; d < channels; ++d) {
    auto p = sample_sparse_positions(derive_seed(seed, "sparse-channel", d), base, len);
    positions.insert(positions.end(), p.begin(), p.end());
    for (std::size_t i = 0; i < base; ++i) values.push_back(stddev * rng.normal());
  }
  return SparseKernel(channels, len, std::move(positions), std::move(values));
}

}  // namespace

KernelParam init_kernel(const KernelInit& init) {
  if (init.base_len == 0 || init.channels == 0) {
    throw Error(Errc::invalid_resolution, "base length and channel count must be positive");
  }
  if (init.branch >= 48) throw Error(Errc::invalid_resolution, "branch index too large");
  const std::size_t dilation = std::size_t{1} << init.branch;
  const std::size_t len = init.base_len * dilation;
  if (init.max_len != 0 && len > init.max_len) {
    throw Error(Errc::invalid_resolution, "branch " + std::to_string(init.branch) + " length " +
                                              std::to_string(len) + " exceeds maximum " +
                                              std::to_string(init.max_len));
  }
  const std::uint64_t seed = derive_seed(init.seed, "branch", init.branch);
  CounterRng rng(seed, stream_id("init"));
  const double stddev = 1.0 / std::sqrt(static_cast<double>(init.base_len));
  const std::size_t D = init.channels;

  switch (init.kind) {
    case KernelKind::dense:
      return DenseKernel{normal_matrix(D, len, stddev, rng)};
    case KernelKind::dilated:
      return DilatedKernel(normal_matrix(D, init.base_len, stddev, rng), dilation, len);
    case KernelKind::fourier:
      return init_fourier(D, len, init.base_len, stddev, rng);
    case KernelKind::sparse:
      return init_sparse(D, len, init.base_len, stddev, seed, rng);
    case KernelKind::fourier_sparse: {
      auto f = init_fourier(D, len, init.base_len, stddev, rng);
      auto s = init_sparse(D, len, init.base_len, stddev, seed, rng);
      return FourierSparseKernel(std::move(f), std::move(s), std::vector<double>(D, 1.0),
                                 std::vector<double>(D, 1.0));
    }
  }
  throw Error(Errc::invalid_resolution, "unknown kernel kind");
}

namespace {

DenseKernel decimate_dense(const Matrix& full, std::size_t factor) {
  const std::size_t len = std::max<std::size_t>(1, full.cols() / factor);
  Matrix out(full.rows(), len);
  for (std::size_t d = 0; d < full.rows(); ++d) {
    for (std::size_t t = 0; t < full.cols(); ++t) {
      if (t % factor == 0 && t / factor < len) out(d, t / factor) = static_cast<double>(factor) * full(d, t);
    }
  }
  return DenseKernel{std::move(out)};
}

}  // namespace

KernelParam resample_kernel(const KernelParam& k, std::size_t factor) {
  if (factor == 0) throw Error(Errc::invalid_resolution, "resampling factor must be positive");
  if (factor == 1) return k;
  struct Resample {
    std::size_t f;
    KernelParam operator()(const DenseKernel& v) const { return decimate_dense(v.weights, f); }
    KernelParam operator()(const DilatedKernel& v) const {
      // Every tap lands on a kept sample only when f divides the dilation.
      if (v.dilation() % f != 0) return decimate_dense(materialize_dilated(v), f);
      Matrix w = v.weights();
      for (double& x : w.data()) x *= static_cast<double>(f);
      return DilatedKernel(std::move(w), v.dilation() / f, std::max<std::size_t>(1, v.declared_len() / f));
    }
    KernelParam operator()(const FourierKernel& v) const {
      return v.resampled(std::max<std::size_t>(1, v.declared_len() / f));
    }
    KernelParam operator()(const SparseKernel& v) const { return decimate_dense(materialize_sparse(v), f); }
    KernelParam operator()(const FourierSparseKernel& v) const {
      const std::size_t len = std::max<std::size_t>(1, v.declared_len() / f);
      const Matrix kf = materialize_fourier(v.fourier.resampled(len));
      const Matrix ks = decimate_dense(materialize_sparse(v.sparse), f).weights;
      return DenseKernel{combine_linear_rescale(kf, ks, v.scale_fourier, v.scale_sparse)};
    }
  };
  return std::visit(Resample{factor}, k);
}

}  // namespace mrconv
