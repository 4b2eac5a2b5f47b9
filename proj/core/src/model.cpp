#include "mrconv/model.hpp"

#include <cmath>
#include <numbers>

#include "mrconv/error.hpp"
#include "mrconv/rng.hpp"

namespace mrconv {

std::string_view to_string(NormKind k) noexcept { return k == NormKind::layer ? "layer" : "batch"; }

NormKind parse_norm_kind(std::string_view name) {
  if (name == "layer" || name == "ln" || name == "LN") return NormKind::layer;
  if (name == "batch" || name == "bn" || name == "BN") return NormKind::batch;
  throw Error(Errc::config_error, "unknown norm '" + std::string(name) + "' (layer|batch)");
}

std::string_view to_string(PoolKind k) noexcept { return k == PoolKind::mean ? "mean" : "last"; }

PoolKind parse_pool_kind(std::string_view name) {
  if (name == "mean") return PoolKind::mean;
  if (name == "last") return PoolKind::last;
  throw Error(Errc::config_error, "unknown pool '" + std::string(name) + "' (mean|last)");
}

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, double stddev, std::uint64_t seed) {
  CounterRng rng(seed, stream_id("init"));
  Matrix m(rows, cols);
  for (double& v : m.data()) v = stddev * rng.normal();
  return m;
}

}  // namespace

// ---------------------------------------------------------------- block

MRConvBlock::MRConvBlock(const MRConvOptions& conv, const BlockOptions& options, std::uint64_t seed)
    : layer_(conv),
      options_(options),
      pw_weight_(random_matrix(2 * conv.channels, conv.channels, 1.0 / std::sqrt(double(conv.channels)),
                               derive_seed(seed, "pointwise"))),
      pw_bias_(2 * conv.channels, 0.0),
      ln_gamma_(conv.channels, 1.0),
      ln_beta_(conv.channels, 0.0),
      bn_(conv.channels) {
  if (options.dropout < 0.0 || options.dropout >= 1.0) throw Error(Errc::config_error, "dropout must be in [0, 1)");
}

void MRConvBlock::set_mode(LayerMode mode) {
  layer_.set_mode(mode);
  bn_.mode = mode == LayerMode::train ? NormMode::train : NormMode::eval;
}

Var MRConvBlock::norm(Tape& tape, Var x) {
  const std::size_t D = channels();
  if (options_.norm == NormKind::layer) {
    return layer_norm(tape, x, tape.parameter(ln_gamma_, {D}), tape.parameter(ln_beta_, {D}));
  }
  return batchnorm(tape, x, bn_, tape.parameter(bn_.gamma, {D}), tape.parameter(bn_.beta, {D}),
                   bn_.mode == NormMode::train);
}

Var MRConvBlock::forward(Tape& tape, Var u, const ForwardContext& ctx, std::uint64_t site) {
  const std::size_t D = channels();
  Var h = options_.prenorm ? norm(tape, u) : u;
  h = mrconv_forward(tape, layer_, h);
  h = gelu(tape, h);
  h = pointwise_linear(tape, h, tape.parameter(pw_weight_.data(), {2 * D, D}), tape.parameter(pw_bias_, {2 * D}));
  h = glu(tape, h);
  h = dropout(tape, h, options_.dropout, derive_seed(ctx.dropout_seed, "dropout", site),
              layer_.mode() == LayerMode::train);
  if (options_.residual) h = add(tape, u, h);
  return options_.prenorm ? h : norm(tape, h);
}

void MRConvBlock::collect_parameters(const std::string& prefix, std::vector<ParamRef>& out) {
  const std::size_t D = channels();
  layer_.collect_parameters(prefix + "conv.", out);
  out.push_back({prefix + "pointwise.weight", {2 * D, D}, ParamGroup::other, pw_weight_.data()});
  out.push_back({prefix + "pointwise.bias", {2 * D}, ParamGroup::other, pw_bias_});
  if (options_.norm == NormKind::layer) {
    out.push_back({prefix + "norm.gamma", {D}, ParamGroup::other, ln_gamma_});
    out.push_back({prefix + "norm.beta", {D}, ParamGroup::other, ln_beta_});
  } else {
    out.push_back({prefix + "norm.gamma", {D}, ParamGroup::other, bn_.gamma});
    out.push_back({prefix + "norm.beta", {D}, ParamGroup::other, bn_.beta});
    out.push_back({prefix + "norm.running_mean", {D}, ParamGroup::buffer, bn_.running_mean});
    out.push_back({prefix + "norm.running_var", {D}, ParamGroup::buffer, bn_.running_var});
  }
}

// ---------------------------------------------------------------- model

Model::Model(const ModelOptions& options) : options_(options) {
  if (options.depth == 0) throw Error(Errc::config_error, "model depth must be at least 1");
  if (options.width == 0 || options.in_dim == 0 || options.classes == 0)
    throw Error(Errc::config_error, "model width, input dim and classes must be positive");
  if (options.pool == PoolKind::last && (options.pool_last == 0 || options.pool_last > options.seq_len))
    throw Error(Errc::config_error, "pool_last must be in [1, seq_len]");
  const std::size_t D = options.width;
  enc_weight_ = random_matrix(D, options.in_dim, 1.0 / std::sqrt(double(options.in_dim)),
                              derive_seed(options.seed, "encoder"));
  enc_bias_.assign(D, 0.0);
  for (std::size_t i = 0; i < options.depth; ++i) {
    MRConvOptions conv = options.conv;
    conv.channels = D;
    conv.max_len = options.seq_len;
    conv.seed = derive_seed(options.seed, "block", i);
    blocks_.emplace_back(conv, options.block, conv.seed);
  }
  head_weight_ = random_matrix(options.classes, D, 1.0 / std::sqrt(double(D)), derive_seed(options.seed, "head"));
  head_bias_.assign(options.classes, 0.0);
}

std::size_t Model::labels_per_example() const noexcept {
  return options_.pool == PoolKind::last ? options_.pool_last : 1;
}

void Model::set_mode(LayerMode mode) {
  mode_ = mode;
  for (auto& b : blocks_) b.set_mode(mode);
}

Var Model::forward(Tape& tape, const SeqTensor& x, const ForwardContext& ctx) {
  if (x.channels() != options_.in_dim)
    throw Error(Errc::shape_error, "model expects " + std::to_string(options_.in_dim) + " input channels, got " +
                                       std::to_string(x.channels()));
  const std::size_t D = options_.width;
  Var h = pointwise_linear(tape, seq_constant(tape, x), tape.parameter(enc_weight_.data(), {D, options_.in_dim}),
                           tape.parameter(enc_bias_, {D}));
  for (std::size_t i = 0; i < blocks_.size(); ++i) h = blocks_[i].forward(tape, h, ctx, i);
  Var pooled = options_.pool == PoolKind::mean ? mean_pool(tape, h) : last_pool(tape, h, options_.pool_last);
  return linear(tape, pooled, tape.parameter(head_weight_.data(), {options_.classes, D}),
                tape.parameter(head_bias_, {options_.classes}));
}

Matrix Model::logits(const SeqTensor& x) {
  Tape tape;
  Var out = forward(tape, x);
  const auto& s = tape.shape(out);
  return Matrix(s[0] * s[1], s[2], tape.value(out));
}

std::vector<ParamRef> Model::parameters() {
  std::vector<ParamRef> out;
  const std::size_t D = options_.width;
  out.push_back({"encoder.weight", {D, options_.in_dim}, ParamGroup::other, enc_weight_.data()});
  out.push_back({"encoder.bias", {D}, ParamGroup::other, enc_bias_});
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    blocks_[i].collect_parameters("blocks." + std::to_string(i) + ".", out);
  out.push_back({"head.weight", {options_.classes, D}, ParamGroup::other, head_weight_.data()});
  out.push_back({"head.bias", {options_.classes}, ParamGroup::other, head_bias_});
  return out;
}

void Model::parameters_changed() {
  for (auto& b : blocks_) b.layer().invalidate();
}

Model Model::resampled(std::size_t factor) const {
  if (factor == 0 || options_.seq_len % factor != 0)
    throw Error(Errc::invalid_resolution, "resampling factor must divide the sequence length");
  Model out = *this;
  out.options_.seq_len /= factor;
  for (auto& b : out.blocks_) {
    const LayerMode mode = b.layer().mode();
    b.layer() = b.layer().resampled(factor);
    b.set_mode(mode);
  }
  return out;
}

LossAndGrads loss_and_gradients(Model& model, std::vector<ParamRef>& params, const SeqTensor& x,
                                std::span<const int> labels, const ForwardContext& ctx) {
  Tape tape;
  Var logits = model.forward(tape, x, ctx);
  Var loss = cross_entropy(tape, logits, labels);
  tape.backward(loss);
  LossAndGrads out;
  out.loss = tape.value(loss)[0];
  out.grads.reserve(params.size());
  for (const auto& p : params) out.grads.push_back(tape.gradient(p.value));
  const auto& s = tape.shape(logits);
  out.logits = Matrix(s[0] * s[1], s[2], tape.value(logits));
  return out;
}

// ---------------------------------------------------------------- optimiser

void AdamW::step(std::vector<ParamRef>& params, const std::vector<std::vector<double>>& grads, double lr_scale) {
  if (grads.size() != params.size()) throw Error(Errc::shape_error, "one gradient per parameter expected");
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (params[p].group == ParamGroup::buffer) continue;
    if (grads[p].size() != params[p].value.size())
      throw Error(Errc::shape_error, "gradient size mismatch for " + params[p].name);
    for (std::size_t i = 0; i < grads[p].size(); ++i)
      if (!std::isfinite(grads[p][i]))
        throw Error(Errc::non_finite, "non-finite gradient in " + params[p].name + "[" + std::to_string(i) +
                                          "] at step " + std::to_string(t_ + 1));
  }
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.value.size(), 0.0);
      v_.emplace_back(p.value.size(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw Error(Errc::shape_error, "parameter list changed between steps");
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, double(t_));
  const double c2 = 1.0 - std::pow(b2, double(t_));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& ref = params[p];
    if (ref.group == ParamGroup::buffer) continue;
    const bool kernel = ref.group == ParamGroup::kernel;
    const double lr = lr_scale * (kernel ? options_.kernel_lr : options_.lr);
    const double wd = kernel ? 0.0 : options_.weight_decay;
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::size_t i = 0; i < ref.value.size(); ++i) {
      const double g = grads[p][i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      double& x = ref.value[i];
      x -= lr * wd * x;
      x -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + options_.eps);
    }
  }
}

double lr_schedule(std::size_t step, std::size_t total, std::size_t warmup, double base_lr) {
  if (step < warmup) return base_lr * double(step) / double(warmup);
  if (step >= total || total <= warmup) return 0.0;
  const double progress = double(step - warmup) / double(total - warmup);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace mrconv
