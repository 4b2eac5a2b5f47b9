#pragma once

#include <algorithm>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "mrconv/autodiff.hpp"
#include "oracles.hpp"

namespace oracle {

struct GradReport {
  double worst = 0.0;
  std::size_t checked = 0;
};

// Probes d(sum w*y)/d(param) for parameters bound by `build`, comparing the
// tape gradient with central differences. At most `per_param` entries of each
// parameter are sampled.
inline GradReport gradcheck(const std::vector<std::span<double>>& params,
                            const std::function<mrconv::Var(mrconv::Tape&)>& build, std::uint64_t seed = 1,
                            std::size_t per_param = 1000, double h = 1e-5, double floor = 1e-6) {
  using namespace mrconv;
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal;
  Tape tape;
  Var y = build(tape);
  std::vector<double> w(tape.value(y).size());
  for (double& v : w) v = normal(gen);
  tape.backward(y, w);
  auto objective = [&] {
    Tape t;
    Var out = build(t);
    const auto& v = t.value(out);
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += w[i] * v[i];
    return s;
  };
  GradReport report;
  for (auto p : params) {
    const auto analytic = tape.gradient(p);
    std::vector<std::size_t> idx(p.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), gen);
    idx.resize(std::min(idx.size(), per_param));
    for (std::size_t i : idx) {
      const double fd = central_difference(objective, p[i], h);
      report.worst = std::max(report.worst, rel_err(analytic[i], fd, floor));
      ++report.checked;
    }
  }
  return report;
}

}  // namespace oracle
