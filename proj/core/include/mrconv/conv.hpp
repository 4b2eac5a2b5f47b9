#pragma once

#include <cstddef>
#include <span>

#include "mrconv/kernels.hpp"
#include "mrconv/tensor.hpp"

namespace mrconv {

enum class ConvStrategy { automatic, direct, fft };

/// Chooses between the direct and FFT engines. Both compute the same causal
/// depthwise convolution; `automatic` uses direct summation for kernels
/// shorter than `fft_threshold`.
struct ConvEngine {
  ConvStrategy strategy = ConvStrategy::automatic;
  std::size_t fft_threshold = 64;

  bool use_fft(std::size_t kernel_len) const noexcept {
    if (strategy == ConvStrategy::direct) return false;
    if (strategy == ConvStrategy::fft) return true;
    return kernel_len >= fft_threshold;
  }
};

// y[b,d,t] = sum_{tau <= min(t, Lk-1)} k[d,tau] * u[b,d,t-tau]; k has one row per
// channel and Lk <= L (KernelTooLong otherwise).

SeqTensor causal_conv_direct(const SeqTensor& u, const Matrix& k);
SeqTensor causal_conv_fft(const SeqTensor& u, const Matrix& k);
SeqTensor causal_conv(const SeqTensor& u, const Matrix& k, ConvEngine engine = {});

/// Dilated convolution evaluated tap by tap without materialising the kernel.
SeqTensor dilated_conv_direct(const SeqTensor& u, const DilatedKernel& k);

/// causal_conv(u, k_fwd) + reverse_time(causal_conv(reverse_time(u), k_bwd)).
SeqTensor bidirectional_conv(const SeqTensor& u, const Matrix& k_fwd, const Matrix& k_bwd,
                             ConvEngine engine = {});

SeqTensor reverse_time(const SeqTensor& u);

/// Single-lane kernels shared by the tensor engines and the training graph.
void causal_conv_lane_direct(std::span<const double> u, std::span<const double> k,
                             std::span<double> y);
void causal_conv_lane_fft(std::span<const double> u, std::span<const double> k,
                          std::span<double> y);

}  // namespace mrconv
