#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <variant>
#include <vector>

#include "mrconv/fft.hpp"
#include "mrconv/tensor.hpp"

namespace mrconv {

enum class KernelKind { dense, dilated, fourier, sparse, fourier_sparse };

std::string_view to_string(KernelKind kind) noexcept;
KernelKind parse_kernel_kind(std::string_view name);

/// Full-length time-domain kernel, one row per channel.
struct DenseKernel {
  Matrix weights;

  std::size_t channels() const noexcept { return weights.rows(); }
  std::size_t declared_len() const noexcept { return weights.cols(); }
};

/// `taps` stored weights per channel spread `dilation` samples apart. The
/// declared length defaults to the span of the taps, (taps-1)*dilation+1, and
/// may be longer (trailing zeros) so that branch i reaches base_len * 2^i.
class DilatedKernel {
 public:
  DilatedKernel(Matrix weights, std::size_t dilation, std::size_t declared_len = 0);

  std::size_t channels() const noexcept { return weights_.rows(); }
  std::size_t taps() const noexcept { return weights_.cols(); }
  std::size_t dilation() const noexcept { return dilation_; }
  std::size_t span() const noexcept { return (taps() - 1) * dilation_ + 1; }
  std::size_t declared_len() const noexcept { return declared_len_; }

  const Matrix& weights() const noexcept { return weights_; }
  Matrix& weights() noexcept { return weights_; }

 private:
  Matrix weights_;
  std::size_t dilation_;
  std::size_t declared_len_;
};

/// Low-frequency half spectrum, m modes per channel, rendered at declared_len.
/// Hermitian symmetry is implied by the half-spectrum layout; the DC mode (and
/// the Nyquist mode when m-1 == declared_len/2) must be real.
class FourierKernel {
 public:
  FourierKernel(std::size_t channels, std::size_t declared_len, std::vector<Cplx> modes);

  std::size_t channels() const noexcept { return channels_; }
  std::size_t modes_per_channel() const noexcept { return modes_.size() / channels_; }
  std::size_t declared_len() const noexcept { return declared_len_; }

  Cplx mode(std::size_t d, std::size_t j) const noexcept { return modes_[d * modes_per_channel() + j]; }
  std::span<const Cplx> modes() const noexcept { return modes_; }
  std::span<Cplx> modes() noexcept { return modes_; }

  /// Interleaved (re, im) view used for optimisation and checkpoints.
  std::span<double> as_reals() noexcept;
  std::span<const double> as_reals() const noexcept;

  /// Same modes rendered at another length; modes above the new band limit
  /// are dropped and a surviving Nyquist mode loses its imaginary part.
  FourierKernel resampled(std::size_t new_len) const;

  /// Whether mode j of a length-`len` kernel is the DC or Nyquist bin.
  static bool real_bin(std::size_t j, std::size_t len) noexcept { return j == 0 || 2 * j == len; }

 private:
  std::size_t channels_;
  std::size_t declared_len_;
  std::vector<Cplx> modes_;
};

/// Values at frozen positions; positions are strictly increasing per channel.
class SparseKernel {
 public:
  SparseKernel(std::size_t channels, std::size_t declared_len, std::vector<std::size_t> positions,
               std::vector<double> values);

  std::size_t channels() const noexcept { return channels_; }
  std::size_t nonzeros_per_channel() const noexcept { return values_.size() / channels_; }
  std::size_t declared_len() const noexcept { return declared_len_; }

  std::span<const std::size_t> positions() const noexcept { return positions_; }
  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }

 private:
  std::size_t channels_;
  std::size_t declared_len_;
  std::vector<std::size_t> positions_;
  std::vector<double> values_;
};

/// Fourier and sparse kernels of equal length merged by per-channel linear
/// rescaling: k = scale_fourier * k_fourier + scale_sparse * k_sparse.
struct FourierSparseKernel {
  FourierKernel fourier;
  SparseKernel sparse;
  std::vector<double> scale_fourier;
  std::vector<double> scale_sparse;

  FourierSparseKernel(FourierKernel f, SparseKernel s, std::vector<double> scale_f,
                      std::vector<double> scale_s);

  std::size_t channels() const noexcept { return fourier.channels(); }
  std::size_t declared_len() const noexcept { return fourier.declared_len(); }
};

using KernelParam =
    std::variant<DenseKernel, DilatedKernel, FourierKernel, SparseKernel, FourierSparseKernel>;

KernelKind kind_of(const KernelParam& k) noexcept;
std::size_t declared_len(const KernelParam& k) noexcept;
std::size_t channels(const KernelParam& k) noexcept;

/// Number of stored real parameters per channel.
std::size_t parameters_per_channel(const KernelParam& k) noexcept;

Matrix materialize_dilated(const DilatedKernel& k);
Matrix materialize_fourier(const FourierKernel& k);
Matrix materialize_sparse(const SparseKernel& k);
Matrix materialize(const KernelParam& k);

/// out = scale0 * k0 + scale1 * k1 channelwise. Scales hold one entry per row.
Matrix combine_linear_rescale(const Matrix& k0, const Matrix& k1, std::span<const double> scale0,
                              std::span<const double> scale1);

/// s distinct sorted positions in [0, length), uniform without replacement.
std::vector<std::size_t> sample_sparse_positions(std::uint64_t seed, std::size_t count,
                                                 std::size_t length);

struct KernelInit {
  KernelKind kind = KernelKind::dilated;
  std::size_t channels = 1;
  std::size_t branch = 0;  // resolution index i, declared_len = base_len * 2^i
  std::size_t base_len = 4;
  std::uint64_t seed = 0;
  std::size_t max_len = 0;  // 0 disables the length check
};

/// Fourier mode count used for a branch of the given length.
std::size_t fourier_modes_for(std::size_t base_len, std::size_t declared_len) noexcept;

KernelParam init_kernel(const KernelInit& init);

/// Renders one channel of a Fourier kernel: out[t] = (1/L) * sum over the
/// Hermitian-completed spectrum. Imaginary parts of real bins are ignored.
void fourier_render(std::span<const Cplx> modes, std::span<double> out);

/// Adjoint of fourier_render: d(loss)/d(mode) given d(loss)/d(out), with the
/// real and imaginary parts treated as independent reals.
void fourier_render_adjoint(std::span<const double> grad_out, std::span<Cplx> grad_modes);

/// The same kernel adapted to a sequence sampled `factor` times more coarsely,
/// treating every kernel as samples of a continuous response:
/// k'[t] = factor * k[factor * t]. Fourier kernels get this exactly by
/// re-rendering their modes at declared_len/factor; dilated kernels whose
/// dilation is a multiple of `factor` keep their form; everything else is
/// decimated into a dense kernel.
KernelParam resample_kernel(const KernelParam& k, std::size_t factor);

}  // namespace mrconv
