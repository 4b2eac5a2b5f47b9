#include "mrconv/mrlayer.hpp"

#include <cmath>
#include <string>

#include "mrconv/error.hpp"
#include "mrconv/rng.hpp"

namespace mrconv {

void BatchNormState::validate() const {
  const std::size_t D = gamma.size();
  if (beta.size() != D || running_mean.size() != D || running_var.size() != D) {
    throw Error(Errc::shape_error, "batchnorm vectors disagree in length");
  }
  if (!(eps >= 0.0)) throw Error(Errc::config_error, "batchnorm eps must be non-negative");
  for (double v : running_var) {
    if (v < 0.0) throw Error(Errc::config_error, "negative running variance");
  }
}

BatchStats batch_statistics(const SeqTensor& x) {
  const std::size_t D = x.channels();
  BatchStats s;
  s.count = x.batch() * x.length();
  s.mean.assign(D, 0.0);
  s.var.assign(D, 0.0);
  if (s.count == 0) return s;
  const double inv = 1.0 / static_cast<double>(s.count);
  for (std::size_t d = 0; d < D; ++d) {
    double sum = 0.0;
    for (std::size_t b = 0; b < x.batch(); ++b) {
      for (double v : x.lane(b, d)) sum += v;
    }
    const double mean = sum * inv;
    double sq = 0.0;
    for (std::size_t b = 0; b < x.batch(); ++b) {
      for (double v : x.lane(b, d)) sq += (v - mean) * (v - mean);
    }
    s.mean[d] = mean;
    s.var[d] = sq * inv;
  }
  return s;
}

void update_running_stats(BatchNormState& bn, const BatchStats& stats) {
  const double n = static_cast<double>(stats.count);
  const double unbias = stats.count > 1 ? n / (n - 1.0) : 1.0;
  for (std::size_t d = 0; d < bn.channels(); ++d) {
    bn.running_mean[d] = (1.0 - bn.momentum) * bn.running_mean[d] + bn.momentum * stats.mean[d];
    bn.running_var[d] = (1.0 - bn.momentum) * bn.running_var[d] + bn.momentum * stats.var[d] * unbias;
  }
}

SeqTensor batchnorm_forward(const SeqTensor& x, BatchNormState& bn) {
  bn.validate();
  if (bn.channels() != x.channels()) throw Error(Errc::shape_error, "batchnorm channel mismatch");
  std::vector<double> mean;
  std::vector<double> var;
  if (bn.mode == NormMode::train) {
    if (x.batch() * x.length() <= 1) {
      throw Error(Errc::degenerate_batch, "train-mode batchnorm needs more than one value per channel");
    }
    BatchStats stats = batch_statistics(x);
    update_running_stats(bn, stats);
    mean = std::move(stats.mean);
    var = std::move(stats.var);
  } else {
    mean = bn.running_mean;
    var = bn.running_var;
  }
  SeqTensor y(x.batch(), x.channels(), x.length());
  for (std::size_t d = 0; d < x.channels(); ++d) {
    const double scale = bn.gamma[d] / std::sqrt(var[d] + bn.eps);
    const double shift = bn.beta[d] - mean[d] * scale;
    for (std::size_t b = 0; b < x.batch(); ++b) {
      auto in = x.lane(b, d);
      auto out = y.lane(b, d);
      for (std::size_t t = 0; t < in.size(); ++t) out[t] = in[t] * scale + shift;
    }
  }
  require_finite(y, "batchnorm_forward");
  return y;
}

FoldedKernel bn_fold(const Matrix& kernel, const BatchNormState& bn) {
  if (bn.mode != NormMode::eval) {
    throw Error(Errc::invalid_mode, "batchnorm folding needs eval-mode statistics");
  }
  bn.validate();
  if (bn.channels() != kernel.rows()) throw Error(Errc::shape_error, "bn_fold channel mismatch");
  FoldedKernel out{Matrix(kernel.rows(), kernel.cols()), std::vector<double>(kernel.rows())};
  for (std::size_t d = 0; d < kernel.rows(); ++d) {
    const double scale = bn.gamma[d] / std::sqrt(bn.running_var[d] + bn.eps);
    for (std::size_t t = 0; t < kernel.cols(); ++t) out.kernel(d, t) = scale * kernel(d, t);
    out.bias[d] = bn.beta[d] - bn.running_mean[d] * scale;
  }
  return out;
}

std::string_view to_string(MergeStyle s) noexcept { return s == MergeStyle::sum ? "sum" : "concat"; }

MergeStyle parse_merge_style(std::string_view name) {
  if (name == "sum") return MergeStyle::sum;
  if (name == "concat") return MergeStyle::concat;
  throw Error(Errc::config_error, "unknown merge style '" + std::string(name) + "'");
}

std::size_t num_resolutions(std::size_t seq_len, std::size_t base_len) {
  if (base_len == 0 || base_len > seq_len) {
    throw Error(Errc::invalid_resolution, "base kernel length must be in [1, L]");
  }
  std::size_t n = 1;
  while (base_len * (std::size_t{1} << n) <= seq_len) ++n;
  return n;
}

std::vector<std::size_t> branch_lengths(std::size_t seq_len, std::size_t base_len) {
  const std::size_t n = num_resolutions(seq_len, base_len);
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = base_len << i;
  return out;
}

std::size_t concat_resolutions(std::size_t seq_len, std::size_t base_len) {
  if (base_len == 0 || base_len > seq_len) {
    throw Error(Errc::invalid_resolution, "base kernel length must be in [1, L]");
  }
  std::size_t n = 1;
  while (concat_offset(base_len, n + 1) <= seq_len) ++n;
  return n;
}

namespace {

std::size_t resolve_branches(const MRConvOptions& o) {
  if (o.max_len == 0) throw Error(Errc::invalid_resolution, "layer needs a maximum sequence length");
  const std::size_t limit = o.merge_style == MergeStyle::sum ? num_resolutions(o.max_len, o.base_len)
                                                             : concat_resolutions(o.max_len, o.base_len);
  if (o.num_branches == 0) return limit;
  if (o.num_branches > limit) {
    throw Error(Errc::invalid_resolution, std::to_string(o.num_branches) + " branches of base length " +
                                              std::to_string(o.base_len) + " do not fit length " +
                                              std::to_string(o.max_len));
  }
  return o.num_branches;
}

}  // namespace

MRConvLayer::MRConvLayer(const MRConvOptions& options) : options_(options) {
  const std::size_t n = resolve_branches(options_);
  options_.num_branches = n;
  branches_.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    KernelInit init{options_.kind, options_.channels, i, options_.base_len, options_.seed, 0};
    MRConvBranch br{init_kernel(init), std::nullopt, BatchNormState(options_.channels), 0};
    if (options_.bidirectional) {
      init.seed = derive_seed(options_.seed, "backward-kernel");
      br.backward_kernel = init_kernel(init);
    }
    if (options_.merge_style == MergeStyle::concat) br.offset = concat_offset(options_.base_len, i);
    branches_.push_back(std::move(br));
  }
  alpha_ = Matrix(n, options_.channels, 1.0 / static_cast<double>(n));
  validate();
}

MRConvLayer::MRConvLayer(const MRConvOptions& options, std::vector<MRConvBranch> branches, Matrix alpha)
    : options_(options), branches_(std::move(branches)), alpha_(std::move(alpha)) {
  options_.num_branches = branches_.size();
  validate();
}

void MRConvLayer::validate() const {
  if (branches_.empty()) throw Error(Errc::invalid_resolution, "layer needs at least one branch");
  if (alpha_.rows() != branches_.size() || alpha_.cols() != options_.channels) {
    throw Error(Errc::shape_error, "alpha must be (branches x channels)");
  }
  for (const auto& br : branches_) {
    if (mrconv::channels(br.kernel) != options_.channels || br.norm.channels() != options_.channels) {
      throw Error(Errc::shape_error, "branch channel count mismatch");
    }
    if (options_.bidirectional != br.backward_kernel.has_value()) {
      throw Error(Errc::shape_error, "bidirectional layers need a backward kernel per branch");
    }
    if (br.backward_kernel && declared_len(*br.backward_kernel) != declared_len(br.kernel)) {
      throw Error(Errc::shape_error, "backward kernel length differs from forward kernel");
    }
  }
  if (options_.max_len != 0 && merged_len() > options_.max_len) {
    throw Error(Errc::invalid_resolution, "merged kernel length " + std::to_string(merged_len()) +
                                              " exceeds the layer budget " + std::to_string(options_.max_len));
  }
}

std::size_t MRConvLayer::merged_len() const noexcept {
  std::size_t len = 0;
  for (const auto& br : branches_) len = std::max(len, br.offset + declared_len(br.kernel));
  return len;
}

double MRConvLayer::combination_weight(std::size_t i, std::size_t d) const noexcept {
  if (options_.merge_style == MergeStyle::concat) return std::pow(options_.fixed_decay, static_cast<double>(i));
  return alpha_(i, d);
}

namespace {

Matrix place(const Matrix& k, std::size_t offset) {
  if (offset == 0) return k;
  Matrix out(k.rows(), offset + k.cols());
  for (std::size_t d = 0; d < k.rows(); ++d) {
    for (std::size_t t = 0; t < k.cols(); ++t) out(d, offset + t) = k(d, t);
  }
  return out;
}

}  // namespace

Matrix MRConvLayer::placed_kernel(std::size_t i) const {
  const auto& br = branches_.at(i);
  return place(materialize(br.kernel), br.offset);
}

Matrix MRConvLayer::placed_backward_kernel(std::size_t i) const {
  const auto& br = branches_.at(i);
  if (!br.backward_kernel) throw Error(Errc::invalid_mode, "layer is not bidirectional");
  return place(materialize(*br.backward_kernel), br.offset);
}

void MRConvLayer::set_mode(LayerMode mode) {
  mode_ = mode;
  for (auto& br : branches_) br.norm.mode = mode == LayerMode::train ? NormMode::train : NormMode::eval;
  if (mode == LayerMode::eval_merged) reparameterize();
}

SeqTensor MRConvLayer::forward_branched(const SeqTensor& u) {
  if (mode_ == LayerMode::eval_merged) {
    throw Error(Errc::invalid_mode, "branched forward needs train or eval_branched mode");
  }
  if (u.channels() != channels()) throw Error(Errc::shape_error, "layer input channel mismatch");
  const bool training = mode_ == LayerMode::train;
  if (training) invalidate();  // running statistics move
  SeqTensor y(u.batch(), u.channels(), u.length());
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    auto& br = branches_[i];
    const Matrix k = placed_kernel(i);
    SeqTensor c = br.backward_kernel ? bidirectional_conv(u, k, placed_backward_kernel(i), engine())
                                     : causal_conv(u, k, engine());
    br.norm.mode = training ? NormMode::train : NormMode::eval;
    const SeqTensor normed = batchnorm_forward(c, br.norm);
    for (std::size_t b = 0; b < u.batch(); ++b) {
      for (std::size_t d = 0; d < u.channels(); ++d) {
        const double w = combination_weight(i, d);
        auto src = normed.lane(b, d);
        auto dst = y.lane(b, d);
        for (std::size_t t = 0; t < src.size(); ++t) dst[t] += w * src[t];
      }
    }
  }
  return y;
}

SeqTensor MRConvLayer::forward_merged(const SeqTensor& u) const {
  if (!merged_current()) throw Error(Errc::stale_merge, "merged kernel is missing or out of date");
  if (u.channels() != channels()) throw Error(Errc::shape_error, "layer input channel mismatch");
  return mrconv::forward_merged(u, *merged_);
}

SeqTensor MRConvLayer::forward(const SeqTensor& u) {
  if (mode_ == LayerMode::eval_merged) {
    if (!merged_current()) reparameterize();
    return forward_merged(u);
  }
  return forward_branched(u);
}

const MergedConv& MRConvLayer::reparameterize() {
  merged_ = options_.merge_style == MergeStyle::sum ? reparameterize_sum(*this) : reparameterize_concat(*this);
  merged_version_ = version_;
  return *merged_;
}

void MRConvLayer::adopt_merged(MergedConv merged) {
  const std::size_t D = channels();
  const bool ok = merged.kernel.rows() == D && merged.kernel.cols() == merged_len() && merged.bias.size() == D &&
                  merged.bidirectional() == bidirectional() &&
                  (!bidirectional() || (merged.backward_kernel.rows() == D && merged.backward_kernel.cols() == merged_len()));
  if (!ok) throw Error(Errc::shape_error, "merged kernel does not match the layer");
  merged_ = std::move(merged);
  merged_version_ = version_;
}

void MRConvLayer::collect_parameters(const std::string& prefix, std::vector<ParamRef>& out) {
  invalidate();
  const std::size_t D = channels();
  auto add_kernel = [&](const std::string& name, KernelParam& k) {
    struct Visit {
      const std::string& name;
      std::vector<ParamRef>& out;
      std::size_t D;
      void operator()(DenseKernel& v) const {
        out.push_back({name + ".weights", {D, v.weights.cols()}, ParamGroup::kernel, v.weights.data()});
      }
      void operator()(DilatedKernel& v) const {
        out.push_back({name + ".weights", {D, v.taps()}, ParamGroup::kernel, v.weights().data()});
      }
      void operator()(FourierKernel& v) const {
        out.push_back({name + ".modes", {D, v.modes_per_channel(), 2}, ParamGroup::kernel, v.as_reals()});
      }
      void operator()(SparseKernel& v) const {
        out.push_back({name + ".values", {D, v.nonzeros_per_channel()}, ParamGroup::kernel, v.values()});
      }
      void operator()(FourierSparseKernel& v) const {
        (*this)(v.fourier);
        out.back().name = name + ".fourier_modes";
        (*this)(v.sparse);
        out.back().name = name + ".sparse_values";
        out.push_back({name + ".scale_fourier", {D}, ParamGroup::kernel, v.scale_fourier});
        out.push_back({name + ".scale_sparse", {D}, ParamGroup::kernel, v.scale_sparse});
      }
    };
    std::visit(Visit{name, out, D}, k);
  };
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    auto& br = branches_[i];
    const std::string p = prefix + "branch" + std::to_string(i);
    add_kernel(p + ".kernel", br.kernel);
    if (br.backward_kernel) add_kernel(p + ".kernel_bwd", *br.backward_kernel);
    out.push_back({p + ".bn.gamma", {D}, ParamGroup::other, br.norm.gamma});
    out.push_back({p + ".bn.beta", {D}, ParamGroup::other, br.norm.beta});
    out.push_back({p + ".bn.running_mean", {D}, ParamGroup::buffer, br.norm.running_mean});
    out.push_back({p + ".bn.running_var", {D}, ParamGroup::buffer, br.norm.running_var});
  }
  if (options_.merge_style == MergeStyle::sum) {
    out.push_back({prefix + "alpha", {alpha_.rows(), alpha_.cols()}, ParamGroup::other, alpha_.data()});
  }
}

MRConvLayer MRConvLayer::resampled(std::size_t factor) const {
  std::vector<MRConvBranch> branches;
  branches.reserve(branches_.size());
  for (const auto& br : branches_) {
    MRConvBranch nb{resample_kernel(br.kernel, factor), std::nullopt, br.norm, br.offset / factor};
    if (br.backward_kernel) nb.backward_kernel = resample_kernel(*br.backward_kernel, factor);
    branches.push_back(std::move(nb));
  }
  MRConvOptions opts = options_;
  opts.max_len = options_.max_len / factor;
  MRConvLayer out(opts, std::move(branches), alpha_);
  out.set_mode(mode_);
  return out;
}

namespace {

void accumulate(Matrix& dst, const Matrix& src, std::size_t offset, std::span<const double> weight) {
  for (std::size_t d = 0; d < src.rows(); ++d) {
    for (std::size_t t = 0; t < src.cols(); ++t) dst(d, offset + t) += weight[d] * src(d, t);
  }
}

void require_eval(const MRConvLayer& layer) {
  for (std::size_t i = 0; i < layer.num_branches(); ++i) {
    if (layer.branch(i).norm.mode != NormMode::eval) {
      throw Error(Errc::invalid_mode, "reparameterization needs eval-mode batchnorm in every branch");
    }
  }
}

// Shared by both styles: the only difference is where each folded branch is
// placed (its offset) and which per-channel weight scales it.
MergedConv merge(const MRConvLayer& layer) {
  require_eval(layer);
  const std::size_t D = layer.channels();
  const std::size_t len = layer.merged_len();
  MergedConv m{Matrix(D, len), std::vector<double>(D, 0.0), Matrix()};
  if (layer.bidirectional()) m.backward_kernel = Matrix(D, len);
  std::vector<double> w(D);
  for (std::size_t i = 0; i < layer.num_branches(); ++i) {
    const auto& br = layer.branch(i);
    for (std::size_t d = 0; d < D; ++d) w[d] = layer.combination_weight(i, d);
    const FoldedKernel f = bn_fold(materialize(br.kernel), br.norm);
    accumulate(m.kernel, f.kernel, br.offset, w);
    if (br.backward_kernel) {
      // The branch BatchNorm scales the sum of both directions; its bias is counted once.
      const FoldedKernel fb = bn_fold(materialize(*br.backward_kernel), br.norm);
      accumulate(m.backward_kernel, fb.kernel, br.offset, w);
    }
    for (std::size_t d = 0; d < D; ++d) m.bias[d] += w[d] * f.bias[d];
  }
  return m;
}

}  // namespace

MergedConv reparameterize_sum(const MRConvLayer& layer) {
  if (layer.merge_style() != MergeStyle::sum) throw Error(Errc::invalid_mode, "layer uses concat merging");
  return merge(layer);
}

MergedConv reparameterize_concat(const MRConvLayer& layer) {
  if (layer.merge_style() != MergeStyle::concat) throw Error(Errc::invalid_mode, "layer uses sum merging");
  return merge(layer);
}

SeqTensor forward_merged(const SeqTensor& u, const MergedConv& merged, ConvEngine engine) {
  SeqTensor y = merged.bidirectional() ? bidirectional_conv(u, merged.kernel, merged.backward_kernel, engine)
                                       : causal_conv(u, merged.kernel, engine);
  for (std::size_t b = 0; b < y.batch(); ++b) {
    for (std::size_t d = 0; d < y.channels(); ++d) {
      for (double& v : y.lane(b, d)) v += merged.bias[d];
    }
  }
  return y;
}

SeqTensor multi_head_expand(const SeqTensor& u, std::size_t heads) {
  if (heads == 0) throw Error(Errc::shape_error, "at least one head required");
  const std::size_t D = u.channels();
  SeqTensor out(u.batch(), heads * D, u.length());
  for (std::size_t b = 0; b < u.batch(); ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t d = 0; d < D; ++d) {
        auto src = u.lane(b, d);
        std::copy(src.begin(), src.end(), out.lane(b, h * D + d).begin());
      }
    }
  }
  return out;
}

SeqTensor grouped_conv(const SeqTensor& u, std::size_t groups, const Matrix& kernels, ConvEngine engine) {
  const std::size_t D = u.channels();
  if (groups == 0 || D % groups != 0) {
    throw Error(Errc::shape_error, std::to_string(groups) + " groups do not divide " + std::to_string(D) +
                                       " channels");
  }
  const std::size_t M = D / groups;
  if (kernels.rows() != M) throw Error(Errc::shape_error, "grouped conv needs D/G kernels");
  Matrix expanded(D, kernels.cols());
  for (std::size_t d = 0; d < D; ++d) {
    auto src = kernels.row(d % M);
    std::copy(src.begin(), src.end(), expanded.row(d).begin());
  }
  return causal_conv(u, expanded, engine);
}

}  // namespace mrconv
