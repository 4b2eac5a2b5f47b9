#include "mrconv/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <string>

#include "mrconv/error.hpp"
#include "mrconv/fft.hpp"
#include "mrconv/rng.hpp"

namespace mrconv {

namespace {

void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) throw Error(Errc::shape_error, std::string(what) + ": unexpected rank");
}

bool any_grad(const Tape& tape, std::initializer_list<Var> vars) {
  for (Var v : vars)
    if (tape.requires_grad(v)) return true;
  return false;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// ---------------------------------------------------------------- tape

Var Tape::constant(std::vector<double> value, Shape shape) {
  return record(std::move(value), std::move(shape), false, {});
}

Var Tape::parameter(std::span<double> storage, Shape shape) {
  if (shape_size(shape) != storage.size()) throw Error(Errc::shape_error, "parameter shape does not match storage");
  if (auto it = bound_.find(storage.data()); it != bound_.end() && !storage.empty()) return Var{it->second};
  Var v = record(std::vector<double>(storage.begin(), storage.end()), std::move(shape), true, {});
  if (!storage.empty()) bound_.emplace(storage.data(), v.id);
  return v;
}

Var Tape::record(std::vector<double> value, Shape shape, bool requires_grad, Backward fn) {
  if (shape_size(shape) != value.size()) throw Error(Errc::shape_error, "op result shape does not match its size");
  nodes_.push_back({std::move(value), {}, std::move(shape), requires_grad});
  if (requires_grad && fn) ops_.emplace_back(nodes_.size() - 1, std::move(fn));
  return Var{nodes_.size() - 1};
}

std::vector<double>& Tape::grad(Var v) {
  auto& n = nodes_.at(v.id);
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Tape::backward(Var loss) {
  if (ops_.empty()) throw Error(Errc::empty_tape, "backward called before any differentiable op was recorded");
  const std::vector<double> seed(value(loss).size(), 1.0);
  backward(loss, seed);
}

void Tape::backward(Var output, std::span<const double> seed) {
  if (ops_.empty()) throw Error(Errc::empty_tape, "backward called before any differentiable op was recorded");
  auto& g = grad(output);
  if (seed.size() != g.size()) throw Error(Errc::shape_error, "gradient seed size mismatch");
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    const auto& out = nodes_[it->first];
    if (out.grad.empty() && !out.value.empty()) continue;
    it->second(*this, out.grad);
  }
}

std::vector<double> Tape::gradient(std::span<const double> storage) const {
  auto it = bound_.find(storage.data());
  if (storage.empty() || it == bound_.end()) return std::vector<double>(storage.size(), 0.0);
  const auto& n = nodes_[it->second];
  return n.grad.empty() ? std::vector<double>(storage.size(), 0.0) : n.grad;
}

void Tape::clear() {
  nodes_.clear();
  ops_.clear();
  bound_.clear();
}

SeqTensor to_seq(const Tape& tape, Var v) {
  const auto& s = tape.shape(v);
  require_rank(s, 3, "to_seq");
  return SeqTensor(s[0], s[1], s[2], tape.value(v));
}

Var seq_constant(Tape& tape, const SeqTensor& x) {
  return tape.constant({x.data().begin(), x.data().end()}, {x.batch(), x.channels(), x.length()});
}

// ---------------------------------------------------------------- elementwise

Var add(Tape& tape, Var a, Var b) {
  if (tape.shape(a) != tape.shape(b)) throw Error(Errc::shape_error, "add: shape mismatch");
  std::vector<double> y = tape.value(a);
  const auto& bv = tape.value(b);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return tape.record(std::move(y), tape.shape(a), any_grad(tape, {a, b}), [a, b](Tape& t, const auto& g) {
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      auto& gv = t.grad(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

Var scale(Tape& tape, Var a, double s) {
  std::vector<double> y = tape.value(a);
  for (double& v : y) v *= s;
  return tape.record(std::move(y), tape.shape(a), tape.requires_grad(a), [a, s](Tape& t, const auto& g) {
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var gelu(Tape& tape, Var x) {
  const auto& xv = tape.value(x);
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] / std::numbers::sqrt2));
  return tape.record(std::move(y), tape.shape(x), tape.requires_grad(x), [x](Tape& t, const auto& g) {
    const auto& xv = t.value(x);
    auto& gx = t.grad(x);
    const double c = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
      gx[i] += g[i] * (cdf + v * c * std::exp(-0.5 * v * v));
    }
  });
}

Var glu(Tape& tape, Var x) {
  const Shape s = tape.shape(x);
  require_rank(s, 3, "glu");
  if (s[1] % 2 != 0) throw Error(Errc::shape_error, "glu needs an even channel count, got " + std::to_string(s[1]));
  const std::size_t B = s[0], D = s[1] / 2, L = s[2];
  const auto& xv = tape.value(x);
  std::vector<double> y(B * D * L);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t t = 0; t < L; ++t)
        y[(b * D + d) * L + t] = xv[(b * 2 * D + d) * L + t] * sigmoid(xv[(b * 2 * D + D + d) * L + t]);
  return tape.record(std::move(y), {B, D, L}, tape.requires_grad(x), [x, B, D, L](Tape& t, const auto& g) {
    const auto& xv = t.value(x);
    auto& gx = t.grad(x);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t d = 0; d < D; ++d)
        for (std::size_t k = 0; k < L; ++k) {
          const std::size_t ia = (b * 2 * D + d) * L + k, ig = ia + D * L;
          const double sg = sigmoid(xv[ig]);
          const double go = g[(b * D + d) * L + k];
          gx[ia] += go * sg;
          gx[ig] += go * xv[ia] * sg * (1.0 - sg);
        }
  });
}

Var pointwise_linear(Tape& tape, Var x, Var weight, Var bias) {
  const Shape s = tape.shape(x);
  require_rank(s, 3, "pointwise_linear");
  const std::size_t B = s[0], Cin = s[1], L = s[2];
  const auto& ws = tape.shape(weight);
  if (ws.size() != 2 || ws[1] != Cin || tape.shape(bias) != Shape{ws[0]})
    throw Error(Errc::shape_error, "pointwise_linear: weight/bias shape mismatch");
  const std::size_t Cout = ws[0];
  const auto& xv = tape.value(x);
  const auto& wv = tape.value(weight);
  const auto& bv = tape.value(bias);
  std::vector<double> y(B * Cout * L);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < Cout; ++o) {
      double* yl = &y[(b * Cout + o) * L];
      std::fill(yl, yl + L, bv[o]);
      for (std::size_t c = 0; c < Cin; ++c) {
        const double w = wv[o * Cin + c];
        const double* xl = &xv[(b * Cin + c) * L];
        for (std::size_t t = 0; t < L; ++t) yl[t] += w * xl[t];
      }
    }
  return tape.record(std::move(y), {B, Cout, L}, any_grad(tape, {x, weight, bias}),
                     [=](Tape& t, const auto& g) {
                       const auto& xv = t.value(x);
                       const auto& wv = t.value(weight);
                       const bool gx_on = t.requires_grad(x), gw_on = t.requires_grad(weight);
                       std::vector<double>* gx = gx_on ? &t.grad(x) : nullptr;
                       std::vector<double>* gw = gw_on ? &t.grad(weight) : nullptr;
                       std::vector<double>* gb = t.requires_grad(bias) ? &t.grad(bias) : nullptr;
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t o = 0; o < Cout; ++o) {
                           const double* gl = &g[(b * Cout + o) * L];
                           if (gb)
                             for (std::size_t k = 0; k < L; ++k) (*gb)[o] += gl[k];
                           for (std::size_t c = 0; c < Cin; ++c) {
                             const double* xl = &xv[(b * Cin + c) * L];
                             if (gw) {
                               double acc = 0.0;
                               for (std::size_t k = 0; k < L; ++k) acc += gl[k] * xl[k];
                               (*gw)[o * Cin + c] += acc;
                             }
                             if (gx) {
                               const double w = wv[o * Cin + c];
                               double* gxl = &(*gx)[(b * Cin + c) * L];
                               for (std::size_t k = 0; k < L; ++k) gxl[k] += w * gl[k];
                             }
                           }
                         }
                     });
}

Var layer_norm(Tape& tape, Var x, Var gamma, Var beta, double eps) {
  const Shape s = tape.shape(x);
  require_rank(s, 3, "layer_norm");
  const std::size_t B = s[0], D = s[1], L = s[2];
  if (tape.shape(gamma) != Shape{D} || tape.shape(beta) != Shape{D})
    throw Error(Errc::shape_error, "layer_norm: affine shape mismatch");
  const auto& xv = tape.value(x);
  const auto& gv = tape.value(gamma);
  const auto& bv = tape.value(beta);
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv = std::make_shared<std::vector<double>>(B * L);
  std::vector<double> y(xv.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < L; ++t) {
      double mean = 0.0, var = 0.0;
      for (std::size_t d = 0; d < D; ++d) mean += xv[(b * D + d) * L + t];
      mean /= static_cast<double>(D);
      for (std::size_t d = 0; d < D; ++d) {
        const double c = xv[(b * D + d) * L + t] - mean;
        var += c * c;
      }
      var /= static_cast<double>(D);
      const double is = 1.0 / std::sqrt(var + eps);
      (*inv)[b * L + t] = is;
      for (std::size_t d = 0; d < D; ++d) {
        const std::size_t i = (b * D + d) * L + t;
        (*xhat)[i] = (xv[i] - mean) * is;
        y[i] = gv[d] * (*xhat)[i] + bv[d];
      }
    }
  return tape.record(std::move(y), s, any_grad(tape, {x, gamma, beta}), [=](Tape& t, const auto& g) {
    const auto& gv = t.value(gamma);
    std::vector<double>* gx = t.requires_grad(x) ? &t.grad(x) : nullptr;
    std::vector<double>* gg = t.requires_grad(gamma) ? &t.grad(gamma) : nullptr;
    std::vector<double>* gb = t.requires_grad(beta) ? &t.grad(beta) : nullptr;
    const double n = static_cast<double>(D);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < L; ++k) {
        double sum = 0.0, dot = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
          const std::size_t i = (b * D + d) * L + k;
          if (gg) (*gg)[d] += g[i] * (*xhat)[i];
          if (gb) (*gb)[d] += g[i];
          const double gh = g[i] * gv[d];
          sum += gh;
          dot += gh * (*xhat)[i];
        }
        if (!gx) continue;
        const double is = (*inv)[b * L + k];
        for (std::size_t d = 0; d < D; ++d) {
          const std::size_t i = (b * D + d) * L + k;
          (*gx)[i] += is / n * (n * g[i] * gv[d] - sum - (*xhat)[i] * dot);
        }
      }
  });
}

Var dropout(Tape& tape, Var x, double p, std::uint64_t seed, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw Error(Errc::shape_error, "dropout probability must be below 1");
  const auto& xv = tape.value(x);
  CounterRng rng(seed, stream_id("dropout"));
  auto mask = std::make_shared<std::vector<double>>(xv.size());
  std::vector<double> y(xv.size());
  const double keep = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < y.size(); ++i) {
    (*mask)[i] = rng.uniform() >= p ? keep : 0.0;
    y[i] = xv[i] * (*mask)[i];
  }
  return tape.record(std::move(y), tape.shape(x), tape.requires_grad(x), [x, mask](Tape& t, const auto& g) {
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
  });
}

Var reverse_time(Tape& tape, Var x) {
  const Shape s = tape.shape(x);
  const std::size_t L = s.back();
  std::vector<double> y = tape.value(x);
  for (std::size_t off = 0; off < y.size(); off += L) std::reverse(y.begin() + off, y.begin() + off + L);
  return tape.record(std::move(y), s, tape.requires_grad(x), [x, L](Tape& t, const auto& g) {
    auto& gx = t.grad(x);
    for (std::size_t off = 0; off < g.size(); off += L)
      for (std::size_t k = 0; k < L; ++k) gx[off + k] += g[off + L - 1 - k];
  });
}

Var slice(Tape& tape, Var stacked, std::size_t i) {
  const Shape s = tape.shape(stacked);
  if (s.empty() || i >= s[0]) throw Error(Errc::shape_error, "slice index out of range");
  const Shape inner(s.begin() + 1, s.end());
  const std::size_t n = shape_size(inner);
  const auto& v = tape.value(stacked);
  std::vector<double> y(v.begin() + i * n, v.begin() + (i + 1) * n);
  return tape.record(std::move(y), inner, tape.requires_grad(stacked), [stacked, i, n](Tape& t, const auto& g) {
    auto& gs = t.grad(stacked);
    for (std::size_t k = 0; k < n; ++k) gs[i * n + k] += g[k];
  });
}

// ---------------------------------------------------------------- normalisation

Var batchnorm(Tape& tape, Var x, BatchNormState& bn, Var gamma, Var beta, bool training) {
  const Shape s = tape.shape(x);
  require_rank(s, 3, "batchnorm");
  const std::size_t B = s[0], D = s[1], L = s[2];
  if (bn.channels() != D || tape.shape(gamma) != Shape{D} || tape.shape(beta) != Shape{D})
    throw Error(Errc::shape_error, "batchnorm: channel mismatch");
  bn.validate();
  const auto& xv = tape.value(x);
  const auto& gv = tape.value(gamma);
  const auto& bv = tape.value(beta);
  const std::size_t count = B * L;
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv = std::make_shared<std::vector<double>>(D);
  std::vector<double> y(xv.size());
  if (training) {
    if (count <= 1) throw Error(Errc::degenerate_batch, "train-mode BatchNorm needs more than one value per channel");
    const SeqTensor xs(B, D, L, xv);
    const BatchStats stats = batch_statistics(xs);
    for (std::size_t d = 0; d < D; ++d) (*inv)[d] = 1.0 / std::sqrt(stats.var[d] + bn.eps);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t d = 0; d < D; ++d)
        for (std::size_t t = 0; t < L; ++t) {
          const std::size_t i = (b * D + d) * L + t;
          (*xhat)[i] = (xv[i] - stats.mean[d]) * (*inv)[d];
        }
    update_running_stats(bn, stats);
  } else {
    for (std::size_t d = 0; d < D; ++d) (*inv)[d] = 1.0 / std::sqrt(bn.running_var[d] + bn.eps);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t d = 0; d < D; ++d)
        for (std::size_t t = 0; t < L; ++t) {
          const std::size_t i = (b * D + d) * L + t;
          (*xhat)[i] = (xv[i] - bn.running_mean[d]) * (*inv)[d];
        }
  }
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t t = 0; t < L; ++t) {
        const std::size_t i = (b * D + d) * L + t;
        y[i] = gv[d] * (*xhat)[i] + bv[d];
      }
  return tape.record(std::move(y), s, any_grad(tape, {x, gamma, beta}), [=](Tape& t, const auto& g) {
    const auto& gv = t.value(gamma);
    std::vector<double>* gx = t.requires_grad(x) ? &t.grad(x) : nullptr;
    std::vector<double>* gg = t.requires_grad(gamma) ? &t.grad(gamma) : nullptr;
    std::vector<double>* gb = t.requires_grad(beta) ? &t.grad(beta) : nullptr;
    const double n = static_cast<double>(count);
    for (std::size_t d = 0; d < D; ++d) {
      double sum = 0.0, dot = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < L; ++k) {
          const std::size_t i = (b * D + d) * L + k;
          sum += g[i];
          dot += g[i] * (*xhat)[i];
        }
      if (gg) (*gg)[d] += dot;
      if (gb) (*gb)[d] += sum;
      if (!gx) continue;
      const double a = gv[d] * (*inv)[d];
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < L; ++k) {
          const std::size_t i = (b * D + d) * L + k;
          (*gx)[i] += training ? a / n * (n * g[i] - sum - (*xhat)[i] * dot) : a * g[i];
        }
    }
  });
}

// ---------------------------------------------------------------- kernels

namespace {

// Writes a (D x len) block into rows of width `width` at column `offset`.
std::vector<double> place_rows(const Matrix& k, std::size_t offset) {
  const std::size_t width = offset + k.cols();
  std::vector<double> out(k.rows() * width, 0.0);
  for (std::size_t d = 0; d < k.rows(); ++d)
    std::copy(k.row(d).begin(), k.row(d).end(), out.begin() + d * width + offset);
  return out;
}

std::span<const Cplx> as_modes(const std::vector<double>& reals, std::size_t d, std::size_t m) {
  return {reinterpret_cast<const Cplx*>(reals.data()) + d * m, m};
}

// Adds the Fourier-render adjoint of one output row into interleaved (re, im) grads.
void fourier_row_adjoint(std::span<const double> grow, std::size_t d, std::size_t m, double w,
                         std::vector<double>& greals) {
  std::vector<Cplx> gm(m);
  fourier_render_adjoint(grow, gm);
  for (std::size_t j = 0; j < m; ++j) {
    greals[2 * (d * m + j)] += w * gm[j].real();
    greals[2 * (d * m + j) + 1] += w * gm[j].imag();
  }
}

}  // namespace

Var kernel_var(Tape& tape, KernelParam& kernel, std::size_t offset) {
  const std::size_t D = channels(kernel);
  const std::size_t len = declared_len(kernel);
  const std::size_t W = offset + len;
  const Shape out_shape{D, W};
  return std::visit(
      [&](auto& k) -> Var {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, DenseKernel>) {
          Var w = tape.parameter(k.weights.data(), {D, len});
          return tape.record(place_rows(k.weights, offset), out_shape, true, [=](Tape& t, const auto& g) {
            auto& gw = t.grad(w);
            for (std::size_t d = 0; d < D; ++d)
              for (std::size_t j = 0; j < len; ++j) gw[d * len + j] += g[d * W + offset + j];
          });
        } else if constexpr (std::is_same_v<K, DilatedKernel>) {
          const std::size_t taps = k.taps(), dil = k.dilation();
          Var w = tape.parameter(k.weights().data(), {D, taps});
          return tape.record(place_rows(materialize_dilated(k), offset), out_shape, true,
                             [=](Tape& t, const auto& g) {
                               auto& gw = t.grad(w);
                               for (std::size_t d = 0; d < D; ++d)
                                 for (std::size_t j = 0; j < taps; ++j) gw[d * taps + j] += g[d * W + offset + j * dil];
                             });
        } else if constexpr (std::is_same_v<K, FourierKernel>) {
          const std::size_t m = k.modes_per_channel();
          Var modes = tape.parameter(k.as_reals(), {D, m, 2});
          Matrix rendered(D, len);
          for (std::size_t d = 0; d < D; ++d) fourier_render(as_modes(tape.value(modes), d, m), rendered.row(d));
          return tape.record(place_rows(rendered, offset), out_shape, true, [=](Tape& t, const auto& g) {
            auto& gm = t.grad(modes);
            for (std::size_t d = 0; d < D; ++d)
              fourier_row_adjoint(std::span<const double>(g).subspan(d * W + offset, len), d, m, 1.0, gm);
          });
        } else if constexpr (std::is_same_v<K, SparseKernel>) {
          const std::size_t s = k.nonzeros_per_channel();
          std::vector<std::size_t> pos(k.positions().begin(), k.positions().end());
          Var v = tape.parameter(k.values(), {D, s});
          return tape.record(place_rows(materialize_sparse(k), offset), out_shape, true,
                             [=, pos = std::move(pos)](Tape& t, const auto& g) {
                               auto& gv = t.grad(v);
                               for (std::size_t d = 0; d < D; ++d)
                                 for (std::size_t j = 0; j < s; ++j) gv[d * s + j] += g[d * W + offset + pos[d * s + j]];
                             });
        } else {
          const std::size_t m = k.fourier.modes_per_channel();
          const std::size_t s = k.sparse.nonzeros_per_channel();
          std::vector<std::size_t> pos(k.sparse.positions().begin(), k.sparse.positions().end());
          Var modes = tape.parameter(k.fourier.as_reals(), {D, m, 2});
          Var vals = tape.parameter(k.sparse.values(), {D, s});
          Var sf = tape.parameter(k.scale_fourier, {D});
          Var ss = tape.parameter(k.scale_sparse, {D});
          auto kf = std::make_shared<Matrix>(materialize_fourier(k.fourier));
          auto ks = std::make_shared<Matrix>(materialize_sparse(k.sparse));
          const Matrix combined = combine_linear_rescale(*kf, *ks, tape.value(sf), tape.value(ss));
          return tape.record(place_rows(combined, offset), out_shape, true,
                             [=, pos = std::move(pos)](Tape& t, const auto& g) {
                               const auto& sfv = t.value(sf);
                               const auto& ssv = t.value(ss);
                               auto& gm = t.grad(modes);
                               auto& gv = t.grad(vals);
                               auto& gsf = t.grad(sf);
                               auto& gss = t.grad(ss);
                               for (std::size_t d = 0; d < D; ++d) {
                                 auto row = std::span<const double>(g).subspan(d * W + offset, len);
                                 for (std::size_t j = 0; j < len; ++j) {
                                   gsf[d] += row[j] * (*kf)(d, j);
                                   gss[d] += row[j] * (*ks)(d, j);
                                 }
                                 fourier_row_adjoint(row, d, m, sfv[d], gm);
                                 for (std::size_t j = 0; j < s; ++j) gv[d * s + j] += ssv[d] * row[pos[d * s + j]];
                               }
                             });
        }
      },
      kernel);
}

// ---------------------------------------------------------------- convolution

Var multi_conv(Tape& tape, Var u, const std::vector<Var>& kernels, ConvEngine engine) {
  const Shape s = tape.shape(u);
  require_rank(s, 3, "multi_conv");
  const std::size_t B = s[0], D = s[1], L = s[2], N = kernels.size();
  std::size_t max_len = 1;
  std::vector<std::size_t> lens(N);
  bool rg = tape.requires_grad(u);
  for (std::size_t i = 0; i < N; ++i) {
    const auto& ks = tape.shape(kernels[i]);
    if (ks.size() != 2 || ks[0] != D) throw Error(Errc::shape_error, "multi_conv: kernel rows must match channels");
    if (ks[1] > L) throw Error(Errc::kernel_too_long, "kernel of length " + std::to_string(ks[1]) + " exceeds L=" + std::to_string(L));
    lens[i] = ks[1];
    max_len = std::max(max_len, lens[i]);
    rg = rg || tape.requires_grad(kernels[i]);
  }
  const auto& uv = tape.value(u);
  std::vector<double> y(N * B * D * L);
  auto lane = [L](std::vector<double>& v, std::size_t idx) { return std::span<double>(v.data() + idx * L, L); };
  auto clane = [L](const std::vector<double>& v, std::size_t idx) {
    return std::span<const double>(v.data() + idx * L, L);
  };

  if (!engine.use_fft(max_len)) {
    for (std::size_t i = 0; i < N; ++i) {
      const auto& kv = tape.value(kernels[i]);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t d = 0; d < D; ++d)
          causal_conv_lane_direct(clane(uv, b * D + d), {kv.data() + d * lens[i], lens[i]},
                                  lane(y, (i * B + b) * D + d));
    }
    return tape.record(std::move(y), {N, B, D, L}, rg, [=](Tape& t, const auto& g) {
      const auto& uv = t.value(u);
      std::vector<double>* gu = t.requires_grad(u) ? &t.grad(u) : nullptr;
      for (std::size_t i = 0; i < N; ++i) {
        const std::size_t lk = lens[i];
        const auto& kv = t.value(kernels[i]);
        std::vector<double>* gk = t.requires_grad(kernels[i]) ? &t.grad(kernels[i]) : nullptr;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t d = 0; d < D; ++d) {
            const double* gl = &g[((i * B + b) * D + d) * L];
            const double* ul = &uv[(b * D + d) * L];
            const double* kl = &kv[d * lk];
            for (std::size_t j = 0; j < lk; ++j) {
              if (gk) {
                double acc = 0.0;
                for (std::size_t k = j; k < L; ++k) acc += gl[k] * ul[k - j];
                (*gk)[d * lk + j] += acc;
              }
              if (gu) {
                double* gul = &(*gu)[(b * D + d) * L];
                for (std::size_t k = 0; k + j < L; ++k) gul[k] += kl[j] * gl[k + j];
              }
            }
          }
      }
    });
  }

  const std::size_t n = next_pow2(L + max_len - 1);
  const std::size_t nb = n / 2 + 1;
  auto U = std::make_shared<std::vector<Cplx>>(B * D * nb);
  auto KF = std::make_shared<std::vector<Cplx>>(N * D * nb);
  for (std::size_t r = 0; r < B * D; ++r) rfft_into(clane(uv, r), n, {U->data() + r * nb, nb});
  for (std::size_t i = 0; i < N; ++i) {
    const auto& kv = tape.value(kernels[i]);
    for (std::size_t d = 0; d < D; ++d)
      rfft_into({kv.data() + d * lens[i], lens[i]}, n, {KF->data() + (i * D + d) * nb, nb});
  }
  std::vector<Cplx> spec(nb);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t d = 0; d < D; ++d) {
        const Cplx* uk = U->data() + (b * D + d) * nb;
        const Cplx* kk = KF->data() + (i * D + d) * nb;
        for (std::size_t f = 0; f < nb; ++f) spec[f] = uk[f] * kk[f];
        irfft_into(spec, n, lane(y, (i * B + b) * D + d));
      }
  return tape.record(std::move(y), {N, B, D, L}, rg, [=](Tape& t, const auto& g) {
    std::vector<double>* gu = t.requires_grad(u) ? &t.grad(u) : nullptr;
    std::vector<Cplx> G(nb), acc(nb);
    std::vector<Cplx> KG(N * D * nb, Cplx{});
    std::vector<double> tmp(std::max(L, max_len));
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t d = 0; d < D; ++d) {
        std::fill(acc.begin(), acc.end(), Cplx{});
        const Cplx* uk = U->data() + (b * D + d) * nb;
        for (std::size_t i = 0; i < N; ++i) {
          rfft_into(clane(g, (i * B + b) * D + d), n, G);
          const Cplx* kk = KF->data() + (i * D + d) * nb;
          if (gu)
            for (std::size_t f = 0; f < nb; ++f) acc[f] += std::conj(kk[f]) * G[f];
          if (t.requires_grad(kernels[i])) {
            Cplx* kg = KG.data() + (i * D + d) * nb;
            for (std::size_t f = 0; f < nb; ++f) kg[f] += G[f] * std::conj(uk[f]);
          }
        }
        if (gu) {
          irfft_into(acc, n, {tmp.data(), L});
          double* gul = &(*gu)[(b * D + d) * L];
          for (std::size_t k = 0; k < L; ++k) gul[k] += tmp[k];
        }
      }
    for (std::size_t i = 0; i < N; ++i) {
      if (!t.requires_grad(kernels[i])) continue;
      auto& gk = t.grad(kernels[i]);
      for (std::size_t d = 0; d < D; ++d) {
        irfft_into({KG.data() + (i * D + d) * nb, nb}, n, {tmp.data(), lens[i]});
        for (std::size_t j = 0; j < lens[i]; ++j) gk[d * lens[i] + j] += tmp[j];
      }
    }
  });
}

Var combine(Tape& tape, const std::vector<Var>& xs, Var weights) {
  if (xs.empty()) throw Error(Errc::shape_error, "combine needs at least one input");
  const Shape s = tape.shape(xs[0]);
  require_rank(s, 3, "combine");
  const std::size_t B = s[0], D = s[1], L = s[2], N = xs.size();
  if (tape.shape(weights) != Shape{N, D}) throw Error(Errc::shape_error, "combine: weights must be (N x D)");
  bool rg = tape.requires_grad(weights);
  for (Var x : xs) {
    if (tape.shape(x) != s) throw Error(Errc::shape_error, "combine: input shape mismatch");
    rg = rg || tape.requires_grad(x);
  }
  const auto& wv = tape.value(weights);
  std::vector<double> y(B * D * L, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    const auto& xv = tape.value(xs[i]);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t d = 0; d < D; ++d) {
        const double w = wv[i * D + d];
        const std::size_t o = (b * D + d) * L;
        for (std::size_t k = 0; k < L; ++k) y[o + k] += w * xv[o + k];
      }
  }
  return tape.record(std::move(y), s, rg, [=](Tape& t, const auto& g) {
    const auto& wv = t.value(weights);
    std::vector<double>* gw = t.requires_grad(weights) ? &t.grad(weights) : nullptr;
    for (std::size_t i = 0; i < N; ++i) {
      const auto& xv = t.value(xs[i]);
      std::vector<double>* gx = t.requires_grad(xs[i]) ? &t.grad(xs[i]) : nullptr;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t d = 0; d < D; ++d) {
          const double w = wv[i * D + d];
          const std::size_t o = (b * D + d) * L;
          double acc = 0.0;
          for (std::size_t k = 0; k < L; ++k) {
            acc += g[o + k] * xv[o + k];
            if (gx) (*gx)[o + k] += w * g[o + k];
          }
          if (gw) (*gw)[i * D + d] += acc;
        }
    }
  });
}

// ---------------------------------------------------------------- heads

Var mean_pool(Tape& tape, Var x) {
  const Shape s = tape.shape(x);
  require_rank(s, 3, "mean_pool");
  const std::size_t B = s[0], D = s[1], L = s[2];
  const auto& xv = tape.value(x);
  std::vector<double> y(B * D, 0.0);
  for (std::size_t r = 0; r < B * D; ++r) {
    for (std::size_t t = 0; t < L; ++t) y[r] += xv[r * L + t];
    y[r] /= static_cast<double>(L);
  }
  return tape.record(std::move(y), {B, 1, D}, tape.requires_grad(x), [=](Tape& t, const auto& g) {
    auto& gx = t.grad(x);
    for (std::size_t r = 0; r < B * D; ++r)
      for (std::size_t k = 0; k < L; ++k) gx[r * L + k] += g[r] / static_cast<double>(L);
  });
}

Var last_pool(Tape& tape, Var x, std::size_t K) {
  const Shape s = tape.shape(x);
  require_rank(s, 3, "last_pool");
  const std::size_t B = s[0], D = s[1], L = s[2];
  if (K == 0 || K > L) throw Error(Errc::shape_error, "last_pool: K must be in [1, L]");
  const auto& xv = tape.value(x);
  std::vector<double> y(B * K * D);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t d = 0; d < D; ++d) y[(b * K + k) * D + d] = xv[(b * D + d) * L + L - K + k];
  return tape.record(std::move(y), {B, K, D}, tape.requires_grad(x), [=](Tape& t, const auto& g) {
    auto& gx = t.grad(x);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t d = 0; d < D; ++d) gx[(b * D + d) * L + L - K + k] += g[(b * K + k) * D + d];
  });
}

Var linear(Tape& tape, Var x, Var weight, Var bias) {
  const Shape s = tape.shape(x);
  require_rank(s, 3, "linear");
  const std::size_t rows = s[0] * s[1], Din = s[2];
  const auto& ws = tape.shape(weight);
  if (ws.size() != 2 || ws[1] != Din || tape.shape(bias) != Shape{ws[0]})
    throw Error(Errc::shape_error, "linear: weight/bias shape mismatch");
  const std::size_t Dout = ws[0];
  const auto& xv = tape.value(x);
  const auto& wv = tape.value(weight);
  const auto& bv = tape.value(bias);
  std::vector<double> y(rows * Dout);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < Dout; ++o) {
      double acc = bv[o];
      for (std::size_t c = 0; c < Din; ++c) acc += wv[o * Din + c] * xv[r * Din + c];
      y[r * Dout + o] = acc;
    }
  return tape.record(std::move(y), {s[0], s[1], Dout}, any_grad(tape, {x, weight, bias}), [=](Tape& t, const auto& g) {
    const auto& xv = t.value(x);
    const auto& wv = t.value(weight);
    std::vector<double>* gx = t.requires_grad(x) ? &t.grad(x) : nullptr;
    std::vector<double>* gw = t.requires_grad(weight) ? &t.grad(weight) : nullptr;
    std::vector<double>* gb = t.requires_grad(bias) ? &t.grad(bias) : nullptr;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < Dout; ++o) {
        const double go = g[r * Dout + o];
        if (gb) (*gb)[o] += go;
        for (std::size_t c = 0; c < Din; ++c) {
          if (gw) (*gw)[o * Din + c] += go * xv[r * Din + c];
          if (gx) (*gx)[r * Din + c] += go * wv[o * Din + c];
        }
      }
  });
}

Var cross_entropy(Tape& tape, Var logits, std::span<const int> labels) {
  const Shape s = tape.shape(logits);
  require_rank(s, 3, "cross_entropy");
  const std::size_t rows = s[0] * s[1], C = s[2];
  if (labels.size() != rows) throw Error(Errc::shape_error, "cross_entropy: one label per logit row expected");
  const auto& lv = tape.value(logits);
  auto probs = std::make_shared<std::vector<double>>(rows * C);
  std::vector<int> lab(labels.begin(), labels.end());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (lab[r] < 0 || static_cast<std::size_t>(lab[r]) >= C) throw Error(Errc::shape_error, "label out of range");
    const double* z = &lv[r * C];
    const double mx = *std::max_element(z, z + C);
    double sum = 0.0;
    for (std::size_t c = 0; c < C; ++c) sum += std::exp(z[c] - mx);
    for (std::size_t c = 0; c < C; ++c) (*probs)[r * C + c] = std::exp(z[c] - mx) / sum;
    loss += std::log(sum) + mx - z[lab[r]];
  }
  loss /= static_cast<double>(rows);
  return tape.record({loss}, {}, tape.requires_grad(logits), [=, lab = std::move(lab)](Tape& t, const auto& g) {
    auto& gl = t.grad(logits);
    const double w = g[0] / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < C; ++c)
        gl[r * C + c] += w * ((*probs)[r * C + c] - (static_cast<int>(c) == lab[r] ? 1.0 : 0.0));
  });
}

// ---------------------------------------------------------------- layer graph

Var mrconv_forward(Tape& tape, MRConvLayer& layer, Var u) {
  const Shape s = tape.shape(u);
  require_rank(s, 3, "mrconv_forward");
  if (layer.mode() == LayerMode::eval_merged) {
    SeqTensor y = layer.forward(to_seq(tape, u));
    return tape.constant(std::move(y.storage()), s);
  }
  const bool training = layer.mode() == LayerMode::train;
  const std::size_t N = layer.num_branches(), D = layer.channels();
  std::vector<Var> fwd, bwd;
  for (std::size_t i = 0; i < N; ++i) {
    auto& br = layer.branch(i);
    fwd.push_back(kernel_var(tape, br.kernel, br.offset));
    if (br.backward_kernel) bwd.push_back(kernel_var(tape, *br.backward_kernel, br.offset));
  }
  Var stacked = multi_conv(tape, u, fwd, layer.engine());
  if (!bwd.empty()) {
    if (bwd.size() != N) throw Error(Errc::shape_error, "every branch of a bidirectional layer needs a backward kernel");
    stacked = add(tape, stacked, reverse_time(tape, multi_conv(tape, reverse_time(tape, u), bwd, layer.engine())));
  }
  std::vector<Var> normed;
  for (std::size_t i = 0; i < N; ++i) {
    auto& bn = layer.branch(i).norm;
    bn.mode = training ? NormMode::train : NormMode::eval;
    Var gamma = tape.parameter(bn.gamma, {D});
    Var beta = tape.parameter(bn.beta, {D});
    normed.push_back(batchnorm(tape, slice(tape, stacked, i), bn, gamma, beta, training));
  }
  Var weights;
  if (layer.merge_style() == MergeStyle::sum) {
    weights = tape.parameter(layer.alpha().data(), {N, D});
  } else {
    std::vector<double> w(N * D);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t d = 0; d < D; ++d) w[i * D + d] = layer.combination_weight(i, d);
    weights = tape.constant(std::move(w), {N, D});
  }
  return combine(tape, normed, weights);
}

}  // namespace mrconv
