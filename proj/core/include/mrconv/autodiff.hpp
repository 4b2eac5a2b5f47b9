#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mrconv/conv.hpp"
#include "mrconv/kernels.hpp"
#include "mrconv/mrlayer.hpp"
#include "mrconv/tensor.hpp"

namespace mrconv {

using Shape = std::vector<std::size_t>;

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  bool valid() const noexcept { return id != static_cast<std::size_t>(-1); }
};

/// Reverse-mode tape. Values and gradients are flat f64 buffers; every op
/// appends a node plus a closure that receives the node's gradient and pushes
/// it into its inputs. backward() runs the closures in exact reverse order of
/// recording; closures whose output received no gradient are skipped.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const std::vector<double>& grad_out)>;

  Var constant(std::vector<double> value, Shape shape);
  /// A trainable leaf bound to external storage. Binding the same storage
  /// twice returns the same node, so shared parameters accumulate gradients.
  Var parameter(std::span<double> storage, Shape shape);
  /// Records an op result. `fn` may be empty for non-differentiable results.
  Var record(std::vector<double> value, Shape shape, bool requires_grad, Backward fn);

  const std::vector<double>& value(Var v) const { return nodes_.at(v.id).value; }
  const Shape& shape(Var v) const { return nodes_.at(v.id).shape; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  /// Gradient buffer, allocated (zeroed) on first access.
  std::vector<double>& grad(Var v);

  /// Seeds d(loss)/d(loss) = 1 for a scalar loss (or `seed` elementwise) and
  /// runs every recorded closure backwards. Throws EmptyTape when nothing
  /// was recorded.
  void backward(Var loss);
  void backward(Var output, std::span<const double> seed);

  /// Gradient with respect to bound parameter storage (zeros if unused).
  std::vector<double> gradient(std::span<const double> storage) const;

  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t num_ops() const noexcept { return ops_.size(); }
  void clear();

 private:
  struct Node {
    std::vector<double> value;
    std::vector<double> grad;
    Shape shape;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  std::vector<std::pair<std::size_t, Backward>> ops_;
  std::unordered_map<const double*, std::size_t> bound_;
};

SeqTensor to_seq(const Tape& tape, Var v);
Var seq_constant(Tape& tape, const SeqTensor& x);

// ---- elementwise / structural ----
Var add(Tape& tape, Var a, Var b);
Var scale(Tape& tape, Var a, double s);
Var gelu(Tape& tape, Var x);
/// Splits the channel axis of (B, 2D, L) in half: a * sigmoid(b). Odd
/// channel counts throw ShapeError.
Var glu(Tape& tape, Var x);
/// (B, Cin, L) -> (B, Cout, L) with weight (Cout x Cin) and bias (Cout).
Var pointwise_linear(Tape& tape, Var x, Var weight, Var bias);
/// Normalises over channels at every (b, t).
Var layer_norm(Tape& tape, Var x, Var gamma, Var beta, double eps = 1e-5);
/// Identity when `training` is false; otherwise zeroes with probability p and
/// scales survivors by 1/(1-p). The mask is a pure function of `seed`.
Var dropout(Tape& tape, Var x, double p, std::uint64_t seed, bool training);
/// Reverses the last (time) axis.
Var reverse_time(Tape& tape, Var x);
/// Slab i of a tensor stacked along its leading axis.
Var slice(Tape& tape, Var stacked, std::size_t i);

// ---- normalisation and convolution ----
/// BatchNorm over (batch, length) per channel of a (B, D, L) tensor. Train
/// mode uses batch statistics and moves bn's running statistics; eval mode
/// uses the running statistics.
Var batchnorm(Tape& tape, Var x, BatchNormState& bn, Var gamma, Var beta, bool training);

/// Materialised kernel (D x offset+len) as a function of the kernel's
/// stored parameters, which are bound as tape parameters.
Var kernel_var(Tape& tape, KernelParam& kernel, std::size_t offset = 0);

/// Causal depthwise convolution of u (B, D, L) with several kernels at once;
/// the result is stacked (N, B, D, L). The input spectrum is shared between
/// kernels in both passes.
Var multi_conv(Tape& tape, Var u, const std::vector<Var>& kernels, ConvEngine engine = {});

/// y[b, d, t] = sum_i weights[i, d] * x_i[b, d, t]; `weights` is (N x D).
Var combine(Tape& tape, const std::vector<Var>& xs, Var weights);

// ---- heads and loss ----
/// (B, D, L) -> (B, 1, D) feature rows.
Var mean_pool(Tape& tape, Var x);
/// (B, D, L) -> (B, K, D): the last K time steps.
Var last_pool(Tape& tape, Var x, std::size_t k);
/// (B, K, Din) -> (B, K, Dout).
Var linear(Tape& tape, Var x, Var weight, Var bias);
/// Mean cross-entropy over the B*K rows of (B, K, C) logits.
Var cross_entropy(Tape& tape, Var logits, std::span<const int> labels);

/// Graph of a multi-resolution layer in its current mode. In eval_merged mode
/// the merged kernel is applied and the result carries no gradient.
Var mrconv_forward(Tape& tape, MRConvLayer& layer, Var u);

}  // namespace mrconv
