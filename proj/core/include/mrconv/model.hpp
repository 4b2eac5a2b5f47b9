#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mrconv/autodiff.hpp"
#include "mrconv/mrlayer.hpp"
#include "mrconv/params.hpp"
#include "mrconv/tensor.hpp"

namespace mrconv {

enum class NormKind { layer, batch };
enum class PoolKind { mean, last };

std::string_view to_string(NormKind k) noexcept;
NormKind parse_norm_kind(std::string_view name);
std::string_view to_string(PoolKind k) noexcept;
PoolKind parse_pool_kind(std::string_view name);

struct BlockOptions {
  NormKind norm = NormKind::layer;
  bool prenorm = true;
  double dropout = 0.0;
  bool residual = true;
};

/// Per-forward settings that are not part of the parameters.
struct ForwardContext {
  std::uint64_t dropout_seed = 0;  // varies per step
};

/// norm -> MRConv -> GELU -> pointwise (D -> 2D) -> GLU -> dropout, with a
/// residual connection. Post-norm applies the norm after the residual add.
class MRConvBlock {
 public:
  MRConvBlock(const MRConvOptions& conv, const BlockOptions& options, std::uint64_t seed);

  std::size_t channels() const noexcept { return layer_.channels(); }
  MRConvLayer& layer() noexcept { return layer_; }
  const MRConvLayer& layer() const noexcept { return layer_; }
  const BlockOptions& options() const noexcept { return options_; }
  Matrix& pointwise_weight() noexcept { return pw_weight_; }
  std::vector<double>& pointwise_bias() noexcept { return pw_bias_; }

  void set_mode(LayerMode mode);
  Var forward(Tape& tape, Var u, const ForwardContext& ctx, std::uint64_t site);
  void collect_parameters(const std::string& prefix, std::vector<ParamRef>& out);

 private:
  Var norm(Tape& tape, Var x);

  MRConvLayer layer_;
  BlockOptions options_;
  Matrix pw_weight_;  // (2D x D)
  std::vector<double> pw_bias_;
  std::vector<double> ln_gamma_, ln_beta_;
  BatchNormState bn_;
};

struct ModelOptions {
  std::size_t in_dim = 1;
  std::size_t width = 16;  // D
  std::size_t classes = 2;
  std::size_t depth = 1;
  std::size_t seq_len = 0;
  PoolKind pool = PoolKind::mean;
  std::size_t pool_last = 1;  // labels per example for PoolKind::last
  MRConvOptions conv{};       // channels and max_len are taken from width and seq_len
  BlockOptions block{};
  std::uint64_t seed = 0;
};

/// Encoder (pointwise in_dim -> D), a stack of blocks, pooling and a linear
/// head. Logits are (B, K, classes) with K = 1 for mean pooling.
class Model {
 public:
  explicit Model(const ModelOptions& options);

  const ModelOptions& options() const noexcept { return options_; }
  std::size_t labels_per_example() const noexcept;
  std::vector<MRConvBlock>& blocks() noexcept { return blocks_; }
  const std::vector<MRConvBlock>& blocks() const noexcept { return blocks_; }
  LayerMode mode() const noexcept { return mode_; }

  void set_mode(LayerMode mode);
  Var forward(Tape& tape, const SeqTensor& x, const ForwardContext& ctx = {});
  /// Convenience forward without gradients; returns (B*K x classes) logits.
  Matrix logits(const SeqTensor& x);

  /// Every trainable parameter and buffer, in a stable order. Collecting
  /// marks merged kernels stale.
  std::vector<ParamRef> parameters();
  /// Call after parameters were changed through ParamRef views.
  void parameters_changed();

  /// A copy with every layer adapted to inputs decimated by `factor`.
  Model resampled(std::size_t factor) const;

 private:
  ModelOptions options_;
  Matrix enc_weight_;  // (D x in_dim)
  std::vector<double> enc_bias_;
  std::vector<MRConvBlock> blocks_;
  Matrix head_weight_;  // (classes x D)
  std::vector<double> head_bias_;
  LayerMode mode_ = LayerMode::train;
};

/// Mean loss and gradients (aligned with `params`) for one batch.
struct LossAndGrads {
  double loss = 0.0;
  std::vector<std::vector<double>> grads;
  Matrix logits;
};

LossAndGrads loss_and_gradients(Model& model, std::vector<ParamRef>& params, const SeqTensor& x,
                                std::span<const int> labels, const ForwardContext& ctx = {});

struct AdamWOptions {
  double lr = 3e-3;
  double kernel_lr = 1e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// AdamW with decoupled weight decay. Kernel parameters use kernel_lr and no
/// weight decay; other parameters use lr and weight_decay; buffers are skipped.
class AdamW {
 public:
  explicit AdamW(AdamWOptions options = {}) : options_(options) {}

  /// `lr_scale` multiplies both learning rates (schedules). Non-finite
  /// gradients throw NonFinite naming the parameter.
  void step(std::vector<ParamRef>& params, const std::vector<std::vector<double>>& grads, double lr_scale = 1.0);

  std::uint64_t steps() const noexcept { return t_; }
  const AdamWOptions& options() const noexcept { return options_; }

 private:
  AdamWOptions options_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Linear warmup from 0 to base_lr over `warmup` steps, then cosine decay to
/// 0 at step `total`.
double lr_schedule(std::size_t step, std::size_t total, std::size_t warmup, double base_lr);

}  // namespace mrconv
