#include <cmath>
#include <numbers>

#include "doctest.h"
#include "gradcheck.hpp"
#include "mrconv/autodiff.hpp"
#include "mrconv/error.hpp"
#include "mrconv/model.hpp"
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

constexpr double kTol = 1e-4;

std::vector<int> random_labels(oracle::Random& rng, std::size_t n, std::size_t classes) {
  std::vector<int> out(n);
  for (int& v : out) v = static_cast<int>(rng.index(0, classes - 1));
  return out;
}

ModelOptions small_model(KernelKind kind, std::size_t depth = 2) {
  ModelOptions o;
  o.in_dim = 2;
  o.width = 8;
  o.classes = 3;
  o.depth = depth;
  o.seq_len = 64;
  o.conv.base_len = 16;
  o.conv.kind = kind;
  o.seed = 5;
  return o;
}

void perturb(Model& model, oracle::Random& rng, double amount = 0.3) {
  for (auto& p : model.parameters())
    if (p.group != ParamGroup::buffer)
      for (double& v : p.value) v += amount * rng.normal();
  model.parameters_changed();
}

}  // namespace

TEST_CASE("elementary op values") {
  Tape tape;
  Var z = tape.constant({0.0, 1.0}, {2});
  CHECK(tape.value(gelu(tape, z))[0] == 0.0);
  CHECK(tape.value(gelu(tape, z))[1] == doctest::Approx(0.5 * (1 + std::erf(1 / std::numbers::sqrt2))));

  Var ab = tape.constant({1.0, -2.0, 3.0, 0.0, 0.0, 0.0}, {1, 2, 3});  // a = row 0, b = 0
  const auto& g = tape.value(glu(tape, ab));
  CHECK(g == std::vector<double>{0.5, -1.0, 1.5});
  Var odd = tape.constant(std::vector<double>(9, 1.0), {1, 3, 3});
  CHECK(code_of([&] { glu(tape, odd); }) == Errc::shape_error);

  for (std::size_t C : {2u, 5u, 10u}) {
    Var logits = tape.constant(std::vector<double>(2 * C, 0.7), {2, 1, C});
    std::vector<int> labels{0, static_cast<int>(C) - 1};
    CHECK(tape.value(cross_entropy(tape, logits, labels))[0] == doctest::Approx(std::log(double(C))).epsilon(1e-14));
  }
}

TEST_CASE("each op's gradient matches central differences") {
  oracle::Random rng(50);
  auto v = [&](std::size_t n) { return rng.vec(n); };

  SUBCASE("elementwise and structural") {
    auto x = v(2 * 6 * 5), y = v(2 * 6 * 5);
    auto run = [&](auto op) {
      return oracle::gradcheck({x, y}, [&](Tape& t) {
        Var a = t.parameter(x, {2, 6, 5});
        Var b = t.parameter(y, {2, 6, 5});
        return op(t, a, b);
      });
    };
    CHECK(run([](Tape& t, Var a, Var b) { return add(t, gelu(t, a), b); }).worst < kTol);
    CHECK(run([](Tape& t, Var a, Var) { return glu(t, a); }).worst < kTol);
    CHECK(run([](Tape& t, Var a, Var b) { return scale(t, add(t, reverse_time(t, a), b), -1.5); }).worst < kTol);
    CHECK(run([](Tape& t, Var a, Var) { return dropout(t, a, 0.3, 9, true); }).worst < kTol);
    CHECK(run([](Tape& t, Var a, Var) { return mean_pool(t, a); }).worst < kTol);
    CHECK(run([](Tape& t, Var a, Var) { return last_pool(t, a, 3); }).worst < kTol);
  }
  SUBCASE("linear maps") {
    auto x = v(2 * 3 * 7), w = v(4 * 3), b = v(4);
    auto r = oracle::gradcheck({x, w, b}, [&](Tape& t) {
      return pointwise_linear(t, t.parameter(x, {2, 3, 7}), t.parameter(w, {4, 3}), t.parameter(b, {4}));
    });
    CHECK(r.worst < kTol);
    auto r2 = oracle::gradcheck({x, w, b}, [&](Tape& t) {
      return linear(t, t.parameter(x, {2, 7, 3}), t.parameter(w, {4, 3}), t.parameter(b, {4}));
    });
    CHECK(r2.worst < kTol);
  }
  SUBCASE("normalisation") {
    auto x = v(3 * 4 * 6), g = v(4), b = v(4);
    CHECK(oracle::gradcheck({x, g, b}, [&](Tape& t) {
            return layer_norm(t, t.parameter(x, {3, 4, 6}), t.parameter(g, {4}), t.parameter(b, {4}));
          }).worst < kTol);
    for (bool training : {true, false}) {
      BatchNormState bn(4);
      bn.running_mean = v(4);
      bn.running_var = {0.5, 1.5, 2.0, 0.9};
      CHECK(oracle::gradcheck({x, g, b}, [&](Tape& t) {
              return batchnorm(t, t.parameter(x, {3, 4, 6}), bn, t.parameter(g, {4}), t.parameter(b, {4}), training);
            }).worst < kTol);
    }
  }
  SUBCASE("combination and slicing") {
    auto s = v(3 * 2 * 4 * 5), w = v(3 * 4);
    CHECK(oracle::gradcheck({s, w}, [&](Tape& t) {
            Var st = t.parameter(s, {3, 2, 4, 5});
            return combine(t, {slice(t, st, 0), slice(t, st, 1), slice(t, st, 2)}, t.parameter(w, {3, 4}));
          }).worst < kTol);
  }
  SUBCASE("cross entropy") {
    auto z = v(3 * 2 * 5);
    std::vector<int> labels{0, 4, 2, 2, 1, 3};
    CHECK(oracle::gradcheck({z}, [&](Tape& t) { return cross_entropy(t, t.parameter(z, {3, 2, 5}), labels); })
              .worst < kTol);
  }
  SUBCASE("multi-kernel convolution, both engines") {
    for (auto strategy : {ConvStrategy::direct, ConvStrategy::fft}) {
      auto u = v(2 * 3 * 40), k0 = v(3 * 5), k1 = v(3 * 17), k2 = v(3 * 40);
      auto r = oracle::gradcheck({u, k0, k1, k2}, [&](Tape& t) {
        Var uu = t.parameter(u, {2, 3, 40});
        return multi_conv(t, uu, {t.parameter(k0, {3, 5}), t.parameter(k1, {3, 17}), t.parameter(k2, {3, 40})},
                          {strategy, 64});
      });
      CHECK(r.worst < kTol);
    }
  }
  SUBCASE("kernel parameterisations") {
    for (auto kind : {KernelKind::dense, KernelKind::dilated, KernelKind::fourier, KernelKind::sparse,
                      KernelKind::fourier_sparse}) {
      KernelParam k = init_kernel({.kind = kind, .channels = 3, .branch = 2, .base_len = 4, .seed = 3});
      std::vector<std::span<double>> spans;
      std::visit(
          [&](auto& kk) {
            using K = std::decay_t<decltype(kk)>;
            if constexpr (std::is_same_v<K, DenseKernel>) spans = {kk.weights.data()};
            else if constexpr (std::is_same_v<K, DilatedKernel>) spans = {kk.weights().data()};
            else if constexpr (std::is_same_v<K, FourierKernel>) spans = {kk.as_reals()};
            else if constexpr (std::is_same_v<K, SparseKernel>) spans = {kk.values()};
            else spans = {kk.fourier.as_reals(), kk.sparse.values(), kk.scale_fourier, kk.scale_sparse};
          },
          k);
      auto r = oracle::gradcheck(spans, [&](Tape& t) { return kernel_var(t, k, 3); });
      INFO(to_string(kind));
      CHECK(r.worst < kTol);
      CHECK(r.checked > 0);
    }
  }
}

TEST_CASE("backward needs a recorded forward") {
  Tape tape;
  CHECK(code_of([&] { tape.backward(Var{}); }) == Errc::empty_tape);
  Var c = tape.constant({1.0}, {});
  CHECK(code_of([&] { tape.backward(c); }) == Errc::empty_tape);
}

TEST_CASE("layer graph agrees with the layer and its alpha gradient is linear") {
  oracle::Random rng(51);
  for (bool bidir : {false, true}) {
    MRConvLayer layer({.channels = 4, .max_len = 32, .base_len = 4, .kind = KernelKind::dilated,
                       .bidirectional = bidir, .seed = 3});
    for (double& a : layer.alpha().data()) a = rng.normal();
    auto u = rng.tensor(3, 4, 32);

    for (auto mode : {LayerMode::train, LayerMode::eval_branched}) {
      MRConvLayer a = layer, b = layer;
      a.set_mode(mode);
      b.set_mode(mode);
      Tape tape;
      Var y = mrconv_forward(tape, a, seq_constant(tape, u));
      CHECK(max_abs_diff(tape.value(y), b.forward(u).data()) < 1e-12);
    }

    // One-hot alpha: d(<g, y>)/d(alpha[i, d]) = <g, branch_i> on channel d.
    MRConvLayer hot = layer;
    for (double& a : hot.alpha().data()) a = 0.0;
    for (std::size_t d = 0; d < 4; ++d) hot.alpha()(1, d) = 1.0;
    hot.set_mode(LayerMode::eval_branched);
    auto g = rng.tensor(3, 4, 32);
    Tape tape;
    Var y = mrconv_forward(tape, hot, seq_constant(tape, u));
    tape.backward(y, g.data());
    const auto ga = tape.gradient(hot.alpha().data());
    for (std::size_t i = 0; i < hot.num_branches(); ++i) {
      auto bn = hot.branch(i).norm;
      const SeqTensor c = bidir ? bidirectional_conv(u, hot.placed_kernel(i), hot.placed_backward_kernel(i))
                                : causal_conv(u, hot.placed_kernel(i));
      const auto act = batchnorm_forward(c, bn);
      for (std::size_t d = 0; d < 4; ++d) {
        double dot = 0.0;
        for (std::size_t bb = 0; bb < 3; ++bb)
          for (std::size_t t = 0; t < 32; ++t) dot += g(bb, d, t) * act(bb, d, t);
        CHECK(ga[i * 4 + d] == doctest::Approx(dot).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("block behaviour") {
  oracle::Random rng(52);
  MRConvOptions conv{.channels = 6, .max_len = 32, .base_len = 4, .kind = KernelKind::fourier, .seed = 2};

  SUBCASE("zero alpha and zero bias leave only the residual path") {
    MRConvBlock block(conv, {}, 1);
    for (double& a : block.layer().alpha().data()) a = 0.0;
    auto u = rng.tensor(2, 6, 32);
    Tape tape;
    Var y = block.forward(tape, seq_constant(tape, u), {}, 0);
    CHECK(tape.value(y) == std::vector<double>(u.data().begin(), u.data().end()));
  }
  SUBCASE("end-to-end block gradient") {
    for (NormKind norm : {NormKind::layer, NormKind::batch}) {
      for (bool pre : {true, false}) {
        MRConvBlock block(conv, {.norm = norm, .prenorm = pre, .dropout = 0.1}, 1);
        std::vector<ParamRef> refs;
        block.collect_parameters("", refs);
        std::vector<std::span<double>> spans;
        for (auto& r : refs)
          if (r.group != ParamGroup::buffer) {
            for (double& x : r.value) x += 0.2 * rng.normal();
            spans.push_back(r.value);
          }
        auto u = rng.tensor(2, 6, 32);
        std::vector<double> ustore(u.data().begin(), u.data().end());
        spans.push_back(ustore);
        auto rep = oracle::gradcheck(spans, [&](Tape& t) {
          block.layer().invalidate();
          return block.forward(t, t.parameter(ustore, {2, 6, 32}), {.dropout_seed = 4}, 0);
        }, 7, 12);
        CHECK(rep.worst < kTol);
      }
    }
  }
  SUBCASE("merged block equals branched block") {
    MRConvBlock block(conv, {.norm = NormKind::batch}, 1);
    for (double& a : block.layer().alpha().data()) a = rng.normal();
    auto u = rng.tensor(4, 6, 32);
    for (int i = 0; i < 3; ++i) {  // move the running statistics
      Tape t;
      block.forward(t, seq_constant(t, rng.tensor(4, 6, 32)), {}, 0);
    }
    block.set_mode(LayerMode::eval_branched);
    Tape t1;
    auto branched = t1.value(block.forward(t1, seq_constant(t1, u), {}, 0));
    block.set_mode(LayerMode::eval_merged);
    Tape t2;
    auto merged = t2.value(block.forward(t2, seq_constant(t2, u), {}, 0));
    CHECK(max_abs_diff(branched, merged) < 1e-6);
  }
}

TEST_CASE("dropout") {
  oracle::Random rng(53);
  Tape tape;
  auto xs = rng.vec(20000);
  for (double& x : xs) x = 1.0 + 0.1 * x;
  Var x = tape.constant(xs, {20000});
  CHECK(dropout(tape, x, 0.5, 3, false).id == x.id);
  const auto& y = tape.value(dropout(tape, x, 0.25, 3, true));
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += y[i];
  }
  CHECK(std::abs(my - mx) / mx < 0.02);
}

TEST_CASE("model gradients for every parameter class") {
  oracle::Random rng(54);
  for (auto kind : {KernelKind::dense, KernelKind::dilated, KernelKind::fourier, KernelKind::sparse,
                    KernelKind::fourier_sparse}) {
    Model model(small_model(kind));
    REQUIRE(model.blocks()[0].layer().num_branches() == 3);
    perturb(model, rng);
    auto x = rng.tensor(2, 2, 64);
    const auto labels = random_labels(rng, 2, 3);
    std::vector<std::span<double>> spans;
    for (auto& p : model.parameters())
      if (p.group != ParamGroup::buffer) spans.push_back(p.value);
    auto rep = oracle::gradcheck(spans, [&](Tape& t) {
      model.parameters_changed();
      return cross_entropy(t, model.forward(t, x), labels);
    }, 11, 6);
    INFO(to_string(kind));
    CHECK(rep.worst < kTol);
  }
}

TEST_CASE("zero upstream gradient gives zero parameter gradients") {
  oracle::Random rng(55);
  Model model(small_model(KernelKind::fourier_sparse, 1));
  auto params = model.parameters();
  Tape tape;
  Var logits = model.forward(tape, rng.tensor(2, 2, 64));
  tape.backward(logits, std::vector<double>(tape.value(logits).size(), 0.0));
  for (auto& p : params)
    for (double g : tape.gradient(p.value)) CHECK(g == 0.0);
}

TEST_CASE("merged inference matches branched inference") {
  oracle::Random rng(56);
  auto opts = small_model(KernelKind::fourier);
  opts.block.norm = NormKind::batch;
  Model model(opts);
  perturb(model, rng, 0.2);
  for (int i = 0; i < 4; ++i) {
    Tape t;
    model.forward(t, rng.tensor(4, 2, 64));
  }
  auto held = rng.tensor(16, 2, 64);
  model.set_mode(LayerMode::eval_branched);
  const Matrix a = model.logits(held);
  model.set_mode(LayerMode::eval_merged);
  const Matrix b = model.logits(held);
  CHECK(max_abs_diff(a.data(), b.data()) < 1e-5);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto ra = a.row(r), rb = b.row(r);
    CHECK(std::max_element(ra.begin(), ra.end()) - ra.begin() == std::max_element(rb.begin(), rb.end()) - rb.begin());
  }
}

TEST_CASE("overfitting a single batch") {
  oracle::Random rng(57);
  ModelOptions o = small_model(KernelKind::fourier, 1);
  o.seq_len = 32;
  o.width = 16;
  o.classes = 4;
  o.conv.base_len = 8;
  Model model(o);
  auto x = rng.tensor(8, 2, 32);
  const auto labels = random_labels(rng, 8, 4);
  auto params = model.parameters();
  AdamW opt({.lr = 5e-3, .kernel_lr = 2e-3, .weight_decay = 0.0});
  double loss = 0.0;
  for (int step = 0; step < 500; ++step) {
    auto lg = loss_and_gradients(model, params, x, labels);
    loss = lg.loss;
    opt.step(params, lg.grads);
    model.parameters_changed();
  }
  CHECK(loss < 0.01);
}

TEST_CASE("adamw") {
  std::vector<double> w{1.0, -2.0}, k{0.5};
  std::vector<ParamRef> params{{"w", {2}, ParamGroup::other, w}, {"k", {1}, ParamGroup::kernel, k}};

  AdamW still({.weight_decay = 0.0});
  still.step(params, {{0.0, 0.0}, {0.0}});
  CHECK(w == std::vector<double>{1.0, -2.0});
  CHECK(k == std::vector<double>{0.5});

  // First step: bias-corrected moments give an update of lr * g / (|g| + eps).
  AdamW first({.lr = 0.1, .kernel_lr = 0.01, .weight_decay = 0.5});
  first.step(params, {{3.0, -0.25}, {2.0}});
  CHECK(w[0] == doctest::Approx(1.0 * (1 - 0.1 * 0.5) - 0.1 * 3.0 / (3.0 + 1e-8)).epsilon(1e-14));
  CHECK(w[1] == doctest::Approx(-2.0 * (1 - 0.1 * 0.5) + 0.1 * 0.25 / (0.25 + 1e-8)).epsilon(1e-14));
  CHECK(k[0] == doctest::Approx(0.5 - 0.01 * 2.0 / (2.0 + 1e-8)).epsilon(1e-14));  // no decay on kernels

  std::vector<double> x{1.0};
  std::vector<ParamRef> px{{"x", {1}, ParamGroup::other, x}};
  AdamW q({.lr = 0.05, .weight_decay = 0.0});
  q.step(px, {{2.0 * x[0]}});
  CHECK(std::abs(x[0]) < 1.0);

  CHECK(code_of([&] { q.step(px, {{std::nan("")}}); }) == Errc::non_finite);
}

TEST_CASE("learning-rate schedule") {
  CHECK(lr_schedule(0, 100, 10, 3e-3) == 0.0);
  CHECK(lr_schedule(5, 100, 10, 3e-3) == doctest::Approx(1.5e-3));
  CHECK(lr_schedule(10, 100, 10, 3e-3) == doctest::Approx(3e-3).epsilon(1e-15));
  CHECK(lr_schedule(55, 100, 10, 3e-3) == doctest::Approx(1.5e-3));
  CHECK(std::abs(lr_schedule(100, 100, 10, 3e-3)) < 1e-12);
  double prev = 1.0;
  for (std::size_t s = 10; s <= 100; ++s) {
    const double lr = lr_schedule(s, 100, 10, 1.0);
    CHECK(lr <= prev);
    prev = lr;
  }
}
