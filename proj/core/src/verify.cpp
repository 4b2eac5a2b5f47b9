#include "mrconv/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <regex>
#include <sstream>

#include "mrconv/autodiff.hpp"
#include "mrconv/conv.hpp"
#include "mrconv/error.hpp"
#include "mrconv/kernels.hpp"
#include "mrconv/model.hpp"
#include "mrconv/mrlayer.hpp"
#include "mrconv/rng.hpp"
#include "mrconv/ssmbridge.hpp"

namespace mrconv {

namespace {

using Clock = std::chrono::steady_clock;

SuiteResult finish(std::string name, double value, double threshold, std::string detail, Clock::time_point t0,
                   bool extra_ok = true) {
  SuiteResult r;
  r.name = std::move(name);
  r.value = value;
  r.threshold = threshold;
  r.passed = extra_ok && std::isfinite(value) && value < threshold;
  r.detail = std::move(detail);
  r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return r;
}

void fill_normal(std::span<double> v, CounterRng& rng, double scale = 1.0) {
  for (double& x : v) x = scale * rng.normal();
}

void randomize_bn(BatchNormState& bn, CounterRng& rng) {
  for (std::size_t d = 0; d < bn.channels(); ++d) {
    bn.gamma[d] = 0.5 + rng.uniform();
    bn.beta[d] = rng.normal();
    bn.running_mean[d] = 0.5 * rng.normal();
    bn.running_var[d] = 0.2 + 2.0 * rng.uniform();
  }
}

constexpr KernelKind kKinds[] = {KernelKind::dense, KernelKind::dilated, KernelKind::fourier, KernelKind::sparse,
                                 KernelKind::fourier_sparse};

}  // namespace

SuiteResult verify_merge_equivalence(std::uint64_t seed, std::size_t configs) {
  const auto t0 = Clock::now();
  CounterRng rng(seed, stream_id("verify-merge"));
  double worst = 0.0;
  std::string worst_cfg;
  for (std::size_t c = 0; c < configs; ++c) {
    MRConvOptions o;
    const std::size_t N = 1 + rng.below(6);
    const std::size_t Ds[] = {1, 8, 64};
    const std::size_t l0s[] = {2, 4, 8};
    o.channels = Ds[rng.below(3)];
    o.base_len = l0s[rng.below(3)];
    o.num_branches = N;
    o.kind = kKinds[c % 5];
    o.merge_style = rng.below(4) == 0 ? MergeStyle::concat : MergeStyle::sum;
    o.bidirectional = rng.below(3) == 0;
    o.fixed_decay = 0.3 + 0.6 * rng.uniform();
    o.max_len = (o.base_len << N) * (1 + rng.below(2));
    o.seed = derive_seed(seed, "layer", c);
    MRConvLayer layer(o);
    for (std::size_t i = 0; i < N; ++i) randomize_bn(layer.branch(i).norm, rng);
    fill_normal(layer.alpha().data(), rng);

    SeqTensor u(2, o.channels, o.max_len);
    fill_normal(u.data(), rng);
    layer.set_mode(LayerMode::eval_branched);
    const SeqTensor yb = layer.forward(u);
    layer.set_mode(LayerMode::eval_merged);
    const SeqTensor ym = layer.forward(u);
    const double err = max_abs_diff(yb.data(), ym.data()) / std::max(max_abs(yb.data()), 1e-300);
    if (err > worst || worst_cfg.empty()) {
      worst = std::max(worst, err);
      std::ostringstream s;
      s << "N=" << N << " D=" << o.channels << " l0=" << o.base_len << " L=" << o.max_len << " "
        << to_string(o.kind) << " " << to_string(o.merge_style) << (o.bidirectional ? " bidirectional" : "");
      worst_cfg = s.str();
    }
  }
  return finish("merge_equivalence", worst, 1e-6,
                std::to_string(configs) + " layers; worst: " + worst_cfg, t0);
}

SuiteResult verify_conv_engines(std::uint64_t seed, std::size_t pairs, std::size_t max_len) {
  const auto t0 = Clock::now();
  CounterRng rng(seed, stream_id("verify-conv"));
  double worst = 0.0;
  std::size_t longest = 0;
  for (std::size_t p = 0; p < pairs; ++p) {
    // A few pairs at the maximum length, the rest log-uniform.
    const std::size_t L = p < 8 ? max_len
                                : std::max<std::size_t>(1, static_cast<std::size_t>(std::exp(
                                                               rng.uniform() * std::log(double(max_len) + 1.0))));
    const std::size_t Lk = 1 + rng.below(std::min(L, max_len));
    SeqTensor u(1, 1, L);
    Matrix k(1, Lk);
    fill_normal(u.data(), rng);
    fill_normal(k.data(), rng);
    const SeqTensor a = causal_conv_direct(u, k), b = causal_conv_fft(u, k);
    worst = std::max(worst, max_abs_diff(a.data(), b.data()) / std::max(max_abs(a.data()), 1e-300));
    longest = std::max(longest, L);
  }
  return finish("conv_engines", worst, 1e-9,
                std::to_string(pairs) + " pairs, longest L=" + std::to_string(longest), t0);
}

SuiteResult verify_bn_fold(std::uint64_t seed, std::size_t instances) {
  const auto t0 = Clock::now();
  CounterRng rng(seed, stream_id("verify-bnfold"));
  double worst = 0.0;
  for (std::size_t i = 0; i < instances; ++i) {
    const std::size_t D = 1 + rng.below(16), L = 8 + rng.below(120), Lk = 1 + rng.below(L);
    Matrix k(D, Lk);
    fill_normal(k.data(), rng, 1.0 / std::sqrt(double(Lk)));
    BatchNormState bn(D);
    randomize_bn(bn, rng);
    bn.mode = NormMode::eval;
    SeqTensor u(2, D, L);
    fill_normal(u.data(), rng);
    const ConvEngine direct{ConvStrategy::direct};
    const SeqTensor ref = batchnorm_forward(causal_conv(u, k, direct), bn);
    const FoldedKernel f = bn_fold(k, bn);
    SeqTensor y = causal_conv(u, f.kernel, direct);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t d = 0; d < D; ++d)
        for (double& v : y.lane(b, d)) v += f.bias[d];
    worst = std::max(worst, max_abs_diff(ref.data(), y.data()) / std::max(1.0, max_abs(ref.data())));
  }
  return finish("bn_fold", worst, 1e-10, std::to_string(instances) + " instances", t0);
}

SuiteResult verify_gradients(std::uint64_t seed, std::size_t per_class) {
  const auto t0 = Clock::now();
  struct Variant {
    const char* label;
    KernelKind kind;
    NormKind norm;
    bool prenorm, bidirectional;
    MergeStyle style;
  };
  const Variant variants[] = {
      {"dense", KernelKind::dense, NormKind::batch, true, false, MergeStyle::sum},
      {"dilated", KernelKind::dilated, NormKind::layer, false, false, MergeStyle::sum},
      {"fourier", KernelKind::fourier, NormKind::batch, true, true, MergeStyle::sum},
      {"sparse", KernelKind::sparse, NormKind::layer, true, false, MergeStyle::sum},
      {"fourier_sparse", KernelKind::fourier_sparse, NormKind::batch, false, true, MergeStyle::sum},
      {"dilated_concat", KernelKind::dilated, NormKind::layer, true, false, MergeStyle::concat},
  };
  const std::regex index(R"(\d+)");
  const double h = 1e-5, floor = 1e-6;
  double worst = 0.0;
  std::string worst_class;
  std::size_t classes = 0, checked = 0;
  for (const auto& v : variants) {
    ModelOptions mo;
    mo.in_dim = 2;
    mo.width = 4;
    mo.classes = 3;
    mo.depth = 2;
    mo.seq_len = 32;
    mo.conv.base_len = 4;
    mo.conv.kind = v.kind;
    mo.conv.merge_style = v.style;
    mo.conv.bidirectional = v.bidirectional;
    mo.block.norm = v.norm;
    mo.block.prenorm = v.prenorm;
    mo.block.dropout = 0.1;
    mo.seed = derive_seed(seed, v.label);
    Model model(mo);
    CounterRng rng(seed, stream_id(v.label));
    SeqTensor x(3, 2, 32);
    fill_normal(x.data(), rng);
    std::vector<int> labels(3);
    for (int& l : labels) l = static_cast<int>(rng.below(3));
    const ForwardContext ctx{derive_seed(seed, "dropout")};

    auto params = model.parameters();
    // Move every parameter off its initial value so no class sits at a
    // special point (e.g. BN gamma = 1, zero biases).
    for (auto& p : params)
      if (p.group != ParamGroup::buffer)
        for (double& w : p.value) w += 0.1 * rng.normal();
    model.parameters_changed();
    const auto lg = loss_and_gradients(model, params, x, labels, ctx);
    auto loss = [&] {
      Tape tape;
      return tape.value(cross_entropy(tape, model.forward(tape, x, ctx), labels))[0];
    };

    std::map<std::string, std::vector<std::pair<std::size_t, std::size_t>>> by_class;
    for (std::size_t p = 0; p < params.size(); ++p) {
      if (params[p].group == ParamGroup::buffer) continue;
      const std::string cls = std::string(v.label) + "/" + std::regex_replace(params[p].name, index, "*");
      for (std::size_t i = 0; i < params[p].value.size(); ++i) by_class[cls].emplace_back(p, i);
    }
    for (auto& [cls, entries] : by_class) {
      ++classes;
      for (std::size_t i = entries.size(); i > 1; --i) std::swap(entries[i - 1], entries[rng.below(i)]);
      entries.resize(std::min(entries.size(), per_class));
      for (auto [p, i] : entries) {
        double& w = params[p].value[i];
        const double w0 = w;
        w = w0 + h;
        const double up = loss();
        w = w0 - h;
        const double down = loss();
        w = w0;
        const double fd = (up - down) / (2 * h);
        const double a = lg.grads[p][i];
        const double err = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), floor});
        ++checked;
        if (err > worst || worst_class.empty()) {
          worst = std::max(worst, err);
          worst_class = cls;
        }
      }
    }
  }
  return finish("gradients", worst, 1e-4,
                std::to_string(classes) + " parameter classes, " + std::to_string(checked) +
                    " entries; worst class " + worst_class,
                t0);
}

SuiteResult verify_ssm_bridge(std::uint64_t seed) {
  const auto t0 = Clock::now();
  CounterRng rng(seed, stream_id("verify-ssm"));
  double expand_err = 0.0;
  for (std::size_t trial = 0; trial < 20; ++trial) {
    const std::size_t L = std::size_t{8} << rng.below(6);
    const std::size_t m = 1 + rng.below(L / 2 + 1);
    const std::size_t D = 1 + rng.below(3);
    std::vector<Cplx> modes(D * m);
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t j = 0; j < m; ++j)
        modes[d * m + j] = FourierKernel::real_bin(j, L) ? Cplx(rng.normal(), 0.0) : Cplx(rng.normal(), rng.normal());
    const FourierKernel k(D, L, modes);
    const Matrix dense = materialize_fourier(k);
    for (std::size_t d = 0; d < D; ++d) {
      const auto coeffs = fourier_to_basis(k, d);
      const auto expanded = basis_expand(coeffs, L);
      expand_err = std::max(expand_err, max_abs_diff(dense.row(d), expanded) / std::max(1.0, max_abs(dense.row(d))));
    }
  }
  std::vector<double> coeffs(9);
  for (double& c : coeffs) c = rng.normal();
  const double e9 = ssm_bridge_error(coeffs, 9, 256), e17 = ssm_bridge_error(coeffs, 17, 256),
               e33 = ssm_bridge_error(coeffs, 33, 256);
  const bool monotone = e17 < e9 && e33 < e17;
  std::ostringstream s;
  s << "basis expansion max err " << expand_err << "; SSM kernel rel. error S=9/17/33: " << e9 << " / " << e17
    << " / " << e33 << (monotone ? " (decreasing)" : " (NOT decreasing)");
  return finish("ssm_bridge", expand_err, 1e-10, s.str(), t0, monotone);
}

SuiteResult verify_resolution_law() {
  const auto t0 = Clock::now();
  const std::size_t n = num_resolutions(1024, 16);
  const auto lens = branch_lengths(1024, 16);
  const bool ok = n == 7 && lens == std::vector<std::size_t>{16, 32, 64, 128, 256, 512, 1024};
  std::ostringstream s;
  s << "num_resolutions(1024, 16) = " << n << ", lengths [";
  for (std::size_t i = 0; i < lens.size(); ++i) s << (i ? ", " : "") << lens[i];
  s << "]";
  return finish("resolution_law", ok ? 0.0 : 1.0, 0.5, s.str(), t0);
}

std::vector<SuiteResult> run_verify_suite(std::uint64_t seed, const std::function<void(const SuiteResult&)>& on_result) {
  std::vector<SuiteResult> out;
  auto run = [&](SuiteResult r) {
    if (on_result) on_result(r);
    out.push_back(std::move(r));
  };
  run(verify_resolution_law());
  run(verify_conv_engines(seed));
  run(verify_bn_fold(seed));
  run(verify_merge_equivalence(seed));
  run(verify_gradients(seed));
  run(verify_ssm_bridge(seed));
  return out;
}

}  // namespace mrconv
