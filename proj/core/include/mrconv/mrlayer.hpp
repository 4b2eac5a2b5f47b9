#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mrconv/conv.hpp"
#include "mrconv/kernels.hpp"
#include "mrconv/params.hpp"
#include "mrconv/tensor.hpp"

namespace mrconv {

enum class NormMode { train, eval };

/// Per-channel BatchNorm parameters and running statistics.
struct BatchNormState {
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double eps = 1e-5;
  double momentum = 0.1;
  NormMode mode = NormMode::train;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : gamma(channels, 1.0), beta(channels, 0.0), running_mean(channels, 0.0), running_var(channels, 1.0) {}

  std::size_t channels() const noexcept { return gamma.size(); }
  void validate() const;
};

/// Per-channel mean and biased variance over (batch, length).
struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;
  std::size_t count = 0;
};

BatchStats batch_statistics(const SeqTensor& x);

/// Moves the running statistics toward a batch (unbiased variance).
void update_running_stats(BatchNormState& bn, const BatchStats& stats);

/// Train mode normalises with batch statistics and updates the running ones;
/// eval mode applies gamma * (x - mean) / sqrt(var + eps) + beta with the
/// running statistics.
SeqTensor batchnorm_forward(const SeqTensor& x, BatchNormState& bn);

struct FoldedKernel {
  Matrix kernel;
  std::vector<double> bias;
};

/// Folds an eval-mode BatchNorm into the preceding convolution:
/// conv(u, folded.kernel) + folded.bias == BN(conv(u, kernel)).
FoldedKernel bn_fold(const Matrix& kernel, const BatchNormState& bn);

enum class LayerMode { train, eval_branched, eval_merged };
enum class MergeStyle { sum, concat };

std::string_view to_string(MergeStyle s) noexcept;
MergeStyle parse_merge_style(std::string_view name);

/// The single-convolution inference form of a layer.
struct MergedConv {
  Matrix kernel;
  std::vector<double> bias;
  Matrix backward_kernel;  // empty unless the layer is bidirectional

  bool bidirectional() const noexcept { return !backward_kernel.empty(); }
  std::size_t length() const noexcept { return kernel.cols(); }
};

struct MRConvBranch {
  KernelParam kernel;
  std::optional<KernelParam> backward_kernel;
  BatchNormState norm;
  std::size_t offset = 0;  // lag of the first tap (concat layout only)
};

struct MRConvOptions {
  std::size_t channels = 1;
  std::size_t max_len = 0;     // sequence length the layer is built for
  std::size_t base_len = 4;    // l0
  std::size_t num_branches = 0;  // 0 derives N from max_len and base_len
  KernelKind kind = KernelKind::dilated;
  MergeStyle merge_style = MergeStyle::sum;
  double fixed_decay = 0.5;
  bool bidirectional = false;
  std::uint64_t seed = 0;
  ConvEngine engine{};
};

/// N = floor(log2(L / l0)) + 1 (exactly log2(L/l0) + 1 for power-of-two ratios).
std::size_t num_resolutions(std::size_t seq_len, std::size_t base_len);
std::vector<std::size_t> branch_lengths(std::size_t seq_len, std::size_t base_len);

/// Largest N whose concatenated segments l0 * (2^N - 1) fit in seq_len.
std::size_t concat_resolutions(std::size_t seq_len, std::size_t base_len);

/// First lag of concat segment i: l0 * (2^i - 1).
constexpr std::size_t concat_offset(std::size_t base_len, std::size_t i) noexcept {
  return base_len * ((std::size_t{1} << i) - 1);
}

/// Multi-resolution convolution: N branches of increasing length, each with
/// its own BatchNorm, combined per channel by alpha (sum style) or by a fixed
/// geometric decay over concatenated segments (concat style). Any mutable
/// access to parameters marks the merged kernel stale.
class MRConvLayer {
 public:
  explicit MRConvLayer(const MRConvOptions& options);
  MRConvLayer(const MRConvOptions& options, std::vector<MRConvBranch> branches, Matrix alpha);

  std::size_t num_branches() const noexcept { return branches_.size(); }
  std::size_t channels() const noexcept { return options_.channels; }
  std::size_t base_len() const noexcept { return options_.base_len; }
  MergeStyle merge_style() const noexcept { return options_.merge_style; }
  bool bidirectional() const noexcept { return options_.bidirectional; }
  double fixed_decay() const noexcept { return options_.fixed_decay; }
  const MRConvOptions& options() const noexcept { return options_; }
  const ConvEngine& engine() const noexcept { return options_.engine; }

  /// Length of the merged kernel: longest branch (sum) or all segments (concat).
  std::size_t merged_len() const noexcept;

  const MRConvBranch& branch(std::size_t i) const { return branches_.at(i); }
  MRConvBranch& branch(std::size_t i) {
    invalidate();
    return branches_.at(i);
  }
  const Matrix& alpha() const noexcept { return alpha_; }
  Matrix& alpha() noexcept {
    invalidate();
    return alpha_;
  }

  /// alpha[i, d] for sum style, fixed_decay^i for concat style.
  double combination_weight(std::size_t i, std::size_t d) const noexcept;

  /// Materialised branch kernel placed at its offset, (D x offset+len).
  Matrix placed_kernel(std::size_t i) const;
  Matrix placed_backward_kernel(std::size_t i) const;

  LayerMode mode() const noexcept { return mode_; }
  /// Switching to an eval mode puts every BatchNorm in eval mode; eval_merged
  /// also rebuilds the merged kernel.
  void set_mode(LayerMode mode);

  SeqTensor forward(const SeqTensor& u);
  SeqTensor forward_branched(const SeqTensor& u);
  /// Throws StaleMerge when parameters changed since the last merge.
  SeqTensor forward_merged(const SeqTensor& u) const;

  /// Builds and stores the merged kernel for the layer's merge style.
  const MergedConv& reparameterize();
  /// Installs a previously exported merged kernel as current (shapes must
  /// match the layer).
  void adopt_merged(MergedConv merged);
  bool merged_current() const noexcept { return merged_ && merged_version_ == version_; }
  const std::optional<MergedConv>& merged() const noexcept { return merged_; }
  void invalidate() noexcept { ++version_; }
  std::uint64_t version() const noexcept { return version_; }

  /// Appends views of every parameter and buffer; marks the merge stale.
  void collect_parameters(const std::string& prefix, std::vector<ParamRef>& out);

  /// Kernels adapted to inputs sampled `factor` times more coarsely.
  MRConvLayer resampled(std::size_t factor) const;

 private:
  void validate() const;

  MRConvOptions options_;
  std::vector<MRConvBranch> branches_;
  Matrix alpha_;
  LayerMode mode_ = LayerMode::train;
  std::optional<MergedConv> merged_;
  std::uint64_t version_ = 0;
  std::uint64_t merged_version_ = 0;
};

MergedConv reparameterize_sum(const MRConvLayer& layer);
MergedConv reparameterize_concat(const MRConvLayer& layer);

/// y = conv(u, merged.kernel) [+ anti-causal part] + bias.
SeqTensor forward_merged(const SeqTensor& u, const MergedConv& merged,
                         ConvEngine engine = {ConvStrategy::fft, 64});

/// Replicates the channels H times: output channel h*D + d carries input d.
SeqTensor multi_head_expand(const SeqTensor& u, std::size_t heads);

/// Reduced-dimension convolution: channel d uses kernel row d mod (D / groups).
SeqTensor grouped_conv(const SeqTensor& u, std::size_t groups, const Matrix& kernels,
                       ConvEngine engine = {});

}  // namespace mrconv
