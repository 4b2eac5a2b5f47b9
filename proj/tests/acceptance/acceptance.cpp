// One PASS/FAIL line per acceptance criterion; exits nonzero if any fails.
// Usage: acceptance <configs dir> <mrconv executable>

#include <malloc.h>
#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include "mrconv/bench.hpp"
#include "mrconv/config.hpp"
#include "mrconv/data.hpp"
#include "mrconv/train.hpp"
#include "mrconv/verify.hpp"

using namespace mrconv;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, const char* name, bool pass, const std::string& detail) {
  failures += !pass;
  std::printf("%s %2d %-22s %s\n", pass ? "PASS" : "FAIL", id, name, detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void suite(int id, const char* name, SuiteResult r, double time_limit = 0.0) {
  const bool in_time = time_limit <= 0.0 || r.seconds < time_limit;
  report(id, name, r.passed && in_time,
         fmt("%.3g < %.3g in %.1fs; %s", r.value, r.threshold, r.seconds, r.detail.c_str()));
}

void speedup(std::uint64_t seed) {
  bool pass = true;
  std::string detail;
  const Clock::time_point t0 = Clock::now();
  for (KernelKind kind : {KernelKind::fourier, KernelKind::dilated, KernelKind::dense}) {
    BenchOptions o;
    o.kind = kind;
    o.seed = seed;
    for (std::size_t L : {1024, 4096})
      for (std::size_t N : {4, 8}) {
        const BenchRow r = bench_layer(L, N, 64, o);
        pass = pass && r.speedup() > 1.0;
        detail += fmt("%s L=%zu N=%zu %.2fx; ", std::string(to_string(kind)).c_str(), L, N, r.speedup());
      }
  }
  report(6, "reparam_speedup", pass, detail + fmt("(%.1fs)", seconds_since(t0)));
}

void zero_shot(const std::string& configs) {
  bool pass = true;
  std::string detail;
  const Clock::time_point t0 = Clock::now();
  for (int seed = 1; seed <= 5; ++seed) {
    double drop[2];
    int i = 0;
    for (const char* kind : {"fourier", "dilated"}) {
      const RunConfig cfg =
          load_config(configs + "/sine_class.yaml", {"seed=" + std::to_string(seed), std::string("model.kernel=") + kind});
      const Splits data = generate(cfg.task);
      const TrainResult r = train(cfg, data);
      Model half = r.model.resampled(2);
      half.set_mode(LayerMode::eval_merged);
      const double a2 = accuracy(half, downsample(data.test, 2));
      drop[i++] = 100.0 * (r.test_accuracy - a2);
      detail += fmt("s%d %s %.1f->%.1f; ", seed, kind, 100.0 * r.test_accuracy, 100.0 * a2);
    }
    pass = pass && drop[0] <= 5.0 && drop[1] > drop[0];
  }
  report(7, "band_limited_zero_shot", pass, detail + fmt("(%.0fs)", seconds_since(t0)));
}

void learning(const std::string& configs) {
  const Clock::time_point t0 = Clock::now();
  bool pass = true;
  std::string detail;
  for (int seed = 1; seed <= 3; ++seed) {
    const RunConfig cfg = load_config(configs + "/copy_memory.yaml", {"seed=" + std::to_string(seed)});
    const TrainResult r = train(cfg, generate(cfg.task));
    pass = pass && r.test_accuracy >= 0.95;
    detail += fmt("seed %d test %.3f; ", seed, r.test_accuracy);
  }

  // Overfit one batch of the same task with the same architecture.
  const RunConfig cfg = load_config(configs + "/copy_memory.yaml", {"optim.weight_decay=0"});
  const Dataset batch = generate(cfg.task).train.slice(0, cfg.optim.batch_size);
  const ModelShape s = model_shape_for(cfg, batch);
  Model model(model_options(cfg, s.in_dim, s.seq_len, s.classes, s.labels_per_example));
  model.set_mode(LayerMode::train);
  auto params = model.parameters();
  AdamW opt(adamw_options(cfg));
  double loss = 0.0;
  int step = 0;
  for (; step < 500; ++step) {
    const auto lg = loss_and_gradients(model, params, batch.x, batch.labels);
    loss = lg.loss;
    if (loss < 0.01) break;
    opt.step(params, lg.grads);
    model.parameters_changed();
  }
  pass = pass && loss < 0.01;
  report(8, "learning_smoke", pass,
         detail + fmt("overfit loss %.2g after %d steps (%.0fs)", loss, step, seconds_since(t0)));
}

void cli_verify(const std::string& exe) {
  const Clock::time_point t0 = Clock::now();
  const std::string cmd = "\"" + exe + "\" verify > /dev/null";
  const int status = std::system(cmd.c_str());
  const double secs = seconds_since(t0);
  const int rc = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  report(10, "verify_cli", rc == 0 && secs < 300.0, fmt("exit code %d in %.1fs", rc, secs));
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  if (argc < 3) {
    std::fprintf(stderr, "usage: %s <configs dir> <mrconv executable>\n", argv[0]);
    return 2;
  }
  const std::string configs = argv[1], exe = argv[2];
  const std::uint64_t seed = 1;
  try {
    suite(1, "merge_equivalence", verify_merge_equivalence(seed), 60.0);
    suite(2, "conv_engines", verify_conv_engines(seed), 60.0);
    suite(3, "bn_fold", verify_bn_fold(seed));
    suite(4, "gradients", verify_gradients(seed));
    suite(5, "ssm_bridge", verify_ssm_bridge(seed));
    speedup(seed);
    zero_shot(configs);
    learning(configs);
    suite(9, "resolution_law", verify_resolution_law());
    cli_verify(exe);
  } catch (const std::exception& e) {
    std::printf("FAIL    aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
