#include <cmath>

#include "doctest.h"
#include "mrconv/error.hpp"
#include "mrconv/mrlayer.hpp"
#include "oracles.hpp"

using namespace mrconv;

namespace {

Errc code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::format_error;
}

void randomize_norms(MRConvLayer& layer, oracle::Random& rng) {
  for (std::size_t i = 0; i < layer.num_branches(); ++i) {
    auto& bn = layer.branch(i).norm;
    for (std::size_t d = 0; d < layer.channels(); ++d) {
      bn.gamma[d] = rng.uniform(0.5, 2.0);
      bn.beta[d] = rng.normal();
      bn.running_mean[d] = rng.normal();
      bn.running_var[d] = rng.uniform(0.1, 3.0);
    }
  }
}

void randomize_alpha(MRConvLayer& layer, oracle::Random& rng) {
  for (double& a : layer.alpha().data()) a = rng.normal();
}

// Explicit per-branch computation: brute-force conv, eval BN by formula, weighted sum.
SeqTensor branched_oracle(const MRConvLayer& layer, const SeqTensor& u) {
  SeqTensor y(u.batch(), u.channels(), u.length());
  for (std::size_t i = 0; i < layer.num_branches(); ++i) {
    const auto& bn = layer.branch(i).norm;
    auto c = oracle::conv_tensor(u, layer.placed_kernel(i));
    for (std::size_t b = 0; b < u.batch(); ++b)
      for (std::size_t d = 0; d < u.channels(); ++d)
        for (std::size_t t = 0; t < u.length(); ++t) {
          const double n = (c(b, d, t) - bn.running_mean[d]) / std::sqrt(bn.running_var[d] + bn.eps) * bn.gamma[d] + bn.beta[d];
          y(b, d, t) += layer.combination_weight(i, d) * n;
        }
  }
  return y;
}

double rel_div(const SeqTensor& a, const SeqTensor& b) {
  return max_abs_diff(a.data(), b.data()) / (1.0 + max_abs(b.data()));
}

}  // namespace

TEST_CASE("resolution count law") {
  CHECK(num_resolutions(1024, 16) == 7);
  CHECK(branch_lengths(1024, 16) == std::vector<std::size_t>{16, 32, 64, 128, 256, 512, 1024});
  CHECK(num_resolutions(1000, 16) == 6);  // floor for non-exact ratios
  CHECK(num_resolutions(16, 16) == 1);
  CHECK(concat_resolutions(14, 2) == 3);
  CHECK(concat_resolutions(13, 2) == 2);
  CHECK(code_of([] { num_resolutions(8, 16); }) == Errc::invalid_resolution);

  for (std::size_t l0 : {1u, 2u, 4u}) {
    MRConvLayer layer({.channels = 2, .max_len = 64, .base_len = l0, .kind = KernelKind::fourier});
    CHECK(layer.merged_len() == l0 << (layer.num_branches() - 1));
    CHECK(layer.merged_len() == 64);
  }
}

TEST_CASE("batchnorm forward") {
  BatchNormState id(1);
  id.mode = NormMode::eval;
  id.eps = 0.0;
  SeqTensor x(1, 1, 3, {1.5, -2.0, 0.25});
  CHECK(max_abs_diff(batchnorm_forward(x, id).data(), x.data()) == 0.0);

  BatchNormState ev(1);
  ev.mode = NormMode::eval;
  ev.eps = 0.0;
  ev.running_mean = {1.0};
  ev.running_var = {4.0};
  ev.gamma = {2.0};
  ev.beta = {0.5};
  CHECK(batchnorm_forward(SeqTensor(1, 1, 1, {3.0}), ev)(0, 0, 0) == doctest::Approx(2.5).epsilon(1e-15));

  oracle::Random rng(31);
  BatchNormState tr(3);
  auto batch = rng.tensor(4, 3, 50);
  for (double& v : batch.data()) v = 3.0 * v + 1.5;
  auto y = batchnorm_forward(batch, tr);
  auto stats = batch_statistics(y);
  for (std::size_t d = 0; d < 3; ++d) {
    CHECK(std::abs(stats.mean[d]) < 1e-12);
    CHECK(stats.var[d] == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(tr.running_mean[d] != 0.0);
  }

  BatchNormState single(1);
  CHECK(code_of([&] { batchnorm_forward(SeqTensor(1, 1, 1, {1.0}), single); }) == Errc::degenerate_batch);
}

TEST_CASE("batchnorm folding") {
  Matrix kernel(1, 3, {1.0, -2.0, 0.5});
  BatchNormState neutral(1);
  neutral.mode = NormMode::eval;
  neutral.running_var = {3.0};
  neutral.gamma = {std::sqrt(3.0 + neutral.eps)};
  auto f = bn_fold(kernel, neutral);
  CHECK(max_abs_diff(f.kernel.data(), kernel.data()) < 1e-15);
  CHECK(f.bias[0] == 0.0);

  BatchNormState bn(1);
  bn.mode = NormMode::eval;
  bn.eps = 0.0;
  bn.gamma = {2.0};
  bn.running_var = {4.0};
  bn.running_mean = {1.0};
  bn.beta = {0.5};
  auto g = bn_fold(kernel, bn);
  CHECK(max_abs_diff(g.kernel.data(), kernel.data()) < 1e-15);
  CHECK(g.bias[0] == doctest::Approx(-0.5));

  BatchNormState train(1);
  CHECK(code_of([&] { bn_fold(kernel, train); }) == Errc::invalid_mode);

  oracle::Random rng(32);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t D = rng.index(1, 6);
    const std::size_t L = rng.index(4, 100);
    auto k = rng.matrix(D, rng.index(1, L));
    BatchNormState s(D);
    s.mode = NormMode::eval;
    for (std::size_t d = 0; d < D; ++d) {
      s.gamma[d] = rng.normal();
      s.beta[d] = rng.normal();
      s.running_mean[d] = rng.normal();
      s.running_var[d] = rng.uniform(0.01, 5.0);
    }
    auto u = rng.tensor(2, D, L);
    auto ref = batchnorm_forward(oracle::conv_tensor(u, k), s);
    auto folded = bn_fold(k, s);
    auto y = oracle::conv_tensor(u, folded.kernel);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t d = 0; d < D; ++d)
        for (double& v : y.lane(b, d)) v += folded.bias[d];
    CHECK(max_abs_diff(y.data(), ref.data()) < 1e-10);
  }
}

TEST_CASE("branched forward combines normalised branches") {
  oracle::Random rng(33);
  MRConvLayer single({.channels = 3, .max_len = 8, .base_len = 8, .kind = KernelKind::dense, .seed = 1});
  REQUIRE(single.num_branches() == 1);
  randomize_norms(single, rng);
  single.set_mode(LayerMode::eval_branched);
  auto u = rng.tensor(2, 3, 32);
  auto one = single.forward(u);
  auto bn = single.branch(0).norm;
  auto ref = batchnorm_forward(causal_conv(u, materialize(single.branch(0).kernel)), bn);
  for (std::size_t i = 0; i < one.size(); ++i) CHECK(one.data()[i] == doctest::Approx(ref.data()[i]));

  MRConvLayer layer({.channels = 4, .max_len = 64, .base_len = 8, .kind = KernelKind::dilated, .seed = 2});
  REQUIRE(layer.num_branches() == 4);
  randomize_norms(layer, rng);
  randomize_alpha(layer, rng);
  layer.set_mode(LayerMode::eval_branched);
  auto v = rng.tensor(3, 4, 64);
  CHECK(rel_div(layer.forward(v), branched_oracle(layer, v)) < 1e-12);

  // One-hot alpha selects a single branch.
  for (double& a : layer.alpha().data()) a = 0.0;
  for (std::size_t d = 0; d < 4; ++d) layer.alpha()(2, d) = 1.0;
  auto sel = layer.forward(v);
  auto b2 = layer.branch(2).norm;
  auto ref2 = batchnorm_forward(causal_conv(v, layer.placed_kernel(2)), b2);
  CHECK(max_abs_diff(sel.data(), ref2.data()) < 1e-12);
}

TEST_CASE("reparameterisation reproduces the branched layer") {
  oracle::Random rng(34);
  SUBCASE("single neutral branch") {
    MRConvLayer layer({.channels = 2, .max_len = 16, .base_len = 16, .kind = KernelKind::fourier, .seed = 3});
    for (double& a : layer.alpha().data()) a = 1.0;
    auto& bn = layer.branch(0).norm;
    bn.eps = 0.0;
    layer.set_mode(LayerMode::eval_merged);
    const auto& m = *layer.merged();
    CHECK(max_abs_diff(m.kernel.data(), materialize(layer.branch(0).kernel).data()) < 1e-15);
    CHECK(m.bias == std::vector<double>{0.0, 0.0});
  }
  SUBCASE("zero alpha") {
    MRConvLayer layer({.channels = 2, .max_len = 32, .base_len = 4, .kind = KernelKind::sparse, .seed = 4});
    randomize_norms(layer, rng);
    for (double& a : layer.alpha().data()) a = 0.0;
    layer.set_mode(LayerMode::eval_merged);
    CHECK(max_abs(layer.merged()->kernel.data()) == 0.0);
    CHECK(max_abs(layer.merged()->bias) == 0.0);
    CHECK(max_abs(layer.forward(rng.tensor(2, 2, 32)).data()) == 0.0);
  }
  SUBCASE("random layers of every kind") {
    for (auto kind : {KernelKind::dense, KernelKind::dilated, KernelKind::fourier, KernelKind::sparse,
                      KernelKind::fourier_sparse}) {
      for (bool bidir : {false, true}) {
        MRConvLayer layer({.channels = 8, .max_len = 64, .base_len = 4, .kind = kind, .bidirectional = bidir, .seed = 5});
        CHECK(layer.num_branches() == 5);
        randomize_norms(layer, rng);
        randomize_alpha(layer, rng);
        layer.set_mode(LayerMode::eval_branched);
        auto u = rng.tensor(2, 8, 64);
        auto branched = layer.forward(u);
        layer.set_mode(LayerMode::eval_merged);
        auto merged = layer.forward(u);
        CHECK(rel_div(merged, branched) < 1e-6);
        CHECK(layer.merged()->length() == 4u << 4);
      }
    }
  }
}

TEST_CASE("merged forward details") {
  oracle::Random rng(35);
  MRConvLayer layer({.channels = 3, .max_len = 32, .base_len = 4, .kind = KernelKind::dilated, .seed = 6});
  randomize_norms(layer, rng);
  layer.set_mode(LayerMode::eval_merged);
  const MergedConv m = *layer.merged();

  SeqTensor impulse(1, 3, 32);
  for (std::size_t d = 0; d < 3; ++d) impulse(0, d, 0) = 1.0;
  auto y = layer.forward_merged(impulse);
  for (std::size_t d = 0; d < 3; ++d)
    for (std::size_t t = 0; t < 32; ++t) CHECK(y(0, d, t) == doctest::Approx(m.kernel(d, t) + m.bias[d]).epsilon(1e-12));

  auto zero = layer.forward_merged(SeqTensor(2, 3, 32));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t d = 0; d < 3; ++d)
      for (double v : zero.lane(b, d)) CHECK(v == m.bias[d]);

  layer.alpha()(0, 0) += 1.0;
  CHECK(!layer.merged_current());
  CHECK(code_of([&] { layer.forward_merged(impulse); }) == Errc::stale_merge);
  CHECK_NOTHROW(layer.forward(impulse));  // lazily rebuilt
  CHECK(layer.merged_current());
}

TEST_CASE("reparameterisation requires eval-mode batchnorm") {
  MRConvLayer layer({.channels = 2, .max_len = 16, .base_len = 4, .seed = 7});
  CHECK(code_of([&] { reparameterize_sum(layer); }) == Errc::invalid_mode);
  CHECK(code_of([&] { reparameterize_concat(layer); }) == Errc::invalid_mode);
}

TEST_CASE("train-mode batchnorm is not reparameterisable") {
  oracle::Random rng(36);
  MRConvLayer layer({.channels = 4, .max_len = 64, .base_len = 4, .kind = KernelKind::fourier, .seed = 8});
  randomize_norms(layer, rng);
  randomize_alpha(layer, rng);
  auto u = rng.tensor(4, 4, 64);
  for (double& v : u.data()) v = 2.0 * v + 0.7;
  layer.set_mode(LayerMode::train);
  auto train_out = layer.forward(u);
  layer.set_mode(LayerMode::eval_merged);
  auto merged_out = layer.forward(u);
  CHECK(max_abs_diff(train_out.data(), merged_out.data()) > 1e-3);
}

TEST_CASE("alpha enters linearly") {
  oracle::Random rng(37);
  MRConvLayer layer({.channels = 2, .max_len = 32, .base_len = 8, .kind = KernelKind::sparse, .seed = 9});
  randomize_norms(layer, rng);
  randomize_alpha(layer, rng);
  layer.set_mode(LayerMode::eval_branched);
  auto u = rng.tensor(2, 2, 32);
  const double h = 1e-5;
  for (std::size_t i = 0; i < layer.num_branches(); ++i) {
    auto bn = layer.branch(i).norm;
    auto branch_out = batchnorm_forward(causal_conv(u, layer.placed_kernel(i)), bn);
    for (std::size_t d = 0; d < 2; ++d) {
      const double saved = layer.alpha()(i, d);
      layer.alpha()(i, d) = saved + h;
      auto yp = layer.forward(u);
      layer.alpha()(i, d) = saved - h;
      auto ym = layer.forward(u);
      layer.alpha()(i, d) = saved;
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t dd = 0; dd < 2; ++dd)
          for (std::size_t t = 0; t < 32; ++t) {
            const double fd = (yp(b, dd, t) - ym(b, dd, t)) / (2 * h);
            const double expected = dd == d ? branch_out(b, dd, t) : 0.0;
            CHECK(std::abs(fd - expected) < 1e-6);
          }
    }
  }
}

TEST_CASE("concatenated layout with fixed decay") {
  auto ones_layer = [](std::size_t n, double decay) {
    std::vector<MRConvBranch> branches;
    for (std::size_t i = 0; i < n; ++i) {
      BatchNormState bn(1);
      bn.eps = 0.0;
      bn.mode = NormMode::eval;
      branches.push_back({DenseKernel{Matrix(1, 2u << i, 1.0)}, std::nullopt, bn, concat_offset(2, i)});
    }
    MRConvOptions o{.channels = 1, .max_len = 16, .base_len = 2, .merge_style = MergeStyle::concat, .fixed_decay = decay};
    return MRConvLayer(o, std::move(branches), Matrix(n, 1, 1.0));
  };
  auto m3 = reparameterize_concat(ones_layer(3, 0.5));
  const std::vector<double> expected{1, 1, .5, .5, .5, .5, .25, .25, .25, .25, .25, .25, .25, .25};
  CHECK(std::vector<double>(m3.kernel.data().begin(), m3.kernel.data().end()) == expected);

  auto m0 = reparameterize_concat(ones_layer(3, 0.0));
  for (std::size_t t = 2; t < 14; ++t) CHECK(m0.kernel(0, t) == 0.0);

  // N = 1 concat equals sum-style merging with alpha = 1.
  oracle::Random rng(38);
  MRConvLayer c1({.channels = 3, .max_len = 8, .base_len = 8, .kind = KernelKind::fourier,
                  .merge_style = MergeStyle::concat, .seed = 10});
  MRConvLayer s1({.channels = 3, .max_len = 8, .base_len = 8, .kind = KernelKind::fourier, .seed = 10});
  for (double& a : s1.alpha().data()) a = 1.0;
  c1.set_mode(LayerMode::eval_branched);
  s1.set_mode(LayerMode::eval_branched);
  auto mc = reparameterize_concat(c1);
  auto ms = reparameterize_sum(s1);
  CHECK(mc.kernel == ms.kernel);
  CHECK(code_of([&] { reparameterize_sum(c1); }) == Errc::invalid_mode);

  MRConvLayer cat({.channels = 4, .max_len = 64, .base_len = 2, .kind = KernelKind::dilated,
                   .merge_style = MergeStyle::concat, .fixed_decay = 0.7, .seed = 11});
  CHECK(cat.num_branches() == 5);
  CHECK(cat.merged_len() == 62);
  randomize_norms(cat, rng);
  cat.set_mode(LayerMode::eval_branched);
  auto u = rng.tensor(2, 4, 64);
  auto br = cat.forward(u);
  cat.set_mode(LayerMode::eval_merged);
  CHECK(rel_div(cat.forward(u), br) < 1e-10);

  MRConvOptions too_many{.channels = 1, .max_len = 16, .base_len = 2, .num_branches = 4,
                         .merge_style = MergeStyle::concat};
  CHECK(code_of([&] { MRConvLayer bad(too_many); }) == Errc::invalid_resolution);
}

TEST_CASE("multi-head expansion") {
  oracle::Random rng(39);
  auto u = rng.tensor(2, 3, 10);
  CHECK(max_abs_diff(multi_head_expand(u, 1).data(), u.data()) == 0.0);
  auto e = multi_head_expand(u, 2);
  CHECK(e.channels() == 6);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t d = 0; d < 3; ++d)
      for (std::size_t t = 0; t < 10; ++t) {
        CHECK(e(b, d, t) == u(b, d, t));
        CHECK(e(b, d + 3, t) == u(b, d, t));
      }
  MRConvLayer one({.channels = 3, .max_len = 16, .base_len = 4, .kind = KernelKind::dilated});
  MRConvLayer two({.channels = 6, .max_len = 16, .base_len = 4, .kind = KernelKind::dilated});
  std::vector<ParamRef> p1, p2;
  one.collect_parameters("", p1);
  two.collect_parameters("", p2);
  std::size_t n1 = 0, n2 = 0;
  for (auto& p : p1) n1 += p.group == ParamGroup::buffer ? 0 : p.value.size();
  for (auto& p : p2) n2 += p.group == ParamGroup::buffer ? 0 : p.value.size();
  CHECK(n2 == 2 * n1);
}

TEST_CASE("grouped convolution shares kernels across groups") {
  oracle::Random rng(40);
  auto u = rng.tensor(2, 4, 20);
  auto k = rng.matrix(2, 5);
  auto y = grouped_conv(u, 2, k);
  // Split into groups, convolve each with the shared kernels, concatenate.
  for (std::size_t g = 0; g < 2; ++g) {
    SeqTensor part(2, 2, 20);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t m = 0; m < 2; ++m)
        for (std::size_t t = 0; t < 20; ++t) part(b, m, t) = u(b, g * 2 + m, t);
    auto py = oracle::conv_tensor(part, k);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t m = 0; m < 2; ++m)
        for (std::size_t t = 0; t < 20; ++t) CHECK(std::abs(py(b, m, t) - y(b, g * 2 + m, t)) < 1e-12);
  }
  auto full = rng.matrix(4, 5);
  CHECK(max_abs_diff(grouped_conv(u, 1, full).data(), causal_conv(u, full).data()) == 0.0);
  auto shared = rng.matrix(1, 5);
  auto ys = grouped_conv(u, 4, shared);
  Matrix rep(4, 5);
  for (std::size_t d = 0; d < 4; ++d)
    for (std::size_t t = 0; t < 5; ++t) rep(d, t) = shared(0, t);
  CHECK(max_abs_diff(ys.data(), causal_conv(u, rep).data()) == 0.0);
  CHECK(code_of([&] { grouped_conv(u, 3, k); }) == Errc::shape_error);
}
