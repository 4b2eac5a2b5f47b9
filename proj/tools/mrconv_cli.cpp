// mrconv: train, evaluate, reparameterise, verify and benchmark MRConv models.

#include <malloc.h>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mrconv/bench.hpp"
#include "mrconv/checkpoint.hpp"
#include "mrconv/config.hpp"
#include "mrconv/data.hpp"
#include "mrconv/error.hpp"
#include "mrconv/train.hpp"
#include "mrconv/verify.hpp"

using namespace mrconv;

namespace {

// Exit codes, one per error class.
enum Exit : int {
  ok = 0,
  verify_failed = 1,
  usage = 2,
  config = 3,
  checkpoint = 4,
  shape = 5,
  data_format = 6,
  diverged = 7,
  numeric = 8,
  internal = 9,
};

int exit_code(Errc e) {
  switch (e) {
    case Errc::config_error: return config;
    case Errc::checkpoint_error: return checkpoint;
    case Errc::shape_error: return shape;
    case Errc::format_error: return data_format;
    case Errc::non_finite:
    case Errc::integration_unstable: return diverged;
    default: return numeric;
  }
}

struct DataArgs {
  std::string images, labels;
};

// Synthetic splits from the task section, or an IDX set split 80/10/10.
Splits load_data(const RunConfig& cfg, const DataArgs& args) {
  if (args.images.empty()) return generate(cfg.task);
  const Dataset all = ingest_idx(args.images, args.labels);
  const std::size_t n = all.size(), n_train = n * 8 / 10, n_val = n / 10;
  return {all.slice(0, n_train), all.slice(n_train, n_train + n_val), all.slice(n_train + n_val, n)};
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::config_error, "cannot write " + path);
  return out;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& sets, const std::string& out_dir,
              const DataArgs& data_args) {
  const RunConfig cfg = load_config(config_path, sets);
  const Splits data = load_data(cfg, data_args);
  std::filesystem::create_directories(out_dir);
  open_out(out_dir + "/config.yaml") << to_yaml(cfg);
  std::ofstream metrics = open_out(out_dir + "/metrics.jsonl");
  TrainOptions opts;
  opts.metrics = &metrics;
  opts.checkpoint_dir = out_dir;
  opts.on_eval = [](const MetricRecord& r) { std::cerr << to_json_line(r) << '\n'; };
  const TrainResult r = train(cfg, data, opts);
  nlohmann::ordered_json summary = {{"steps", r.steps},
                                    {"test_accuracy", r.test_accuracy},
                                    {"checkpoint", out_dir + "/final.ckpt"},
                                    {"metrics", out_dir + "/metrics.jsonl"}};
  std::cout << summary.dump() << '\n';
  return ok;
}

int cmd_eval(const std::string& path, const std::string& split, const DataArgs& data_args) {
  const Checkpoint ck = read_checkpoint(path);
  const RunConfig cfg = parse_config(ck.config_yaml);
  const Splits data = load_data(cfg, data_args);
  const Dataset& ds = split == "train" ? data.train : split == "val" ? data.val : data.test;
  Model model = restore_model(ck);
  const ModeReport rep = evaluate_modes(model, ds, ck.has_merged() ? &ck : nullptr);
  nlohmann::ordered_json out = {{"split", split},
                                {"examples", ds.size()},
                                {"branched_accuracy", rep.branched_accuracy},
                                {"merged_accuracy", rep.merged_accuracy},
                                {"max_logit_divergence", rep.max_logit_divergence},
                                {"merged_source", ck.has_merged() ? "checkpoint" : "recomputed"}};
  std::cout << out.dump() << '\n';
  return ok;
}

int cmd_reparam(const std::string& path, std::string out_path) {
  const Checkpoint ck = read_checkpoint(path);
  Model model = restore_model(ck);
  const RunConfig cfg = parse_config(ck.config_yaml);
  const Checkpoint merged = make_checkpoint(model, cfg, ck.shape, ck.step, true);
  if (out_path.empty()) out_path = path;
  write_checkpoint(out_path, merged);
  std::size_t n = 0;
  for (const auto& e : merged.merged_manifest) n += shape_size(e.shape);
  std::cout << "wrote " << out_path << " with " << merged.merged_manifest.size() << " merged tensors (" << n
            << " values)\n";
  return ok;
}

int cmd_verify(std::uint64_t seed) {
  bool all = true;
  double total = 0.0;
  run_verify_suite(seed, [&](const SuiteResult& r) {
    all = all && r.passed;
    total += r.seconds;
    std::printf("%s %-18s value=%.3g threshold=%.3g (%.2fs) %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(),
                r.value, r.threshold, r.seconds, r.detail.c_str());
    std::fflush(stdout);
  });
  std::printf("%s: verify suite in %.1fs\n", all ? "PASS" : "FAIL", total);
  return all ? ok : verify_failed;
}

int cmd_bench(const std::vector<std::size_t>& Ls, const std::vector<std::size_t>& Ns,
              const std::vector<std::size_t>& Ds, const BenchOptions& opts, const std::string& out_path) {
  std::vector<BenchRow> rows;
  for (auto L : Ls)
    for (auto N : Ns)
      for (auto D : Ds) rows.push_back(bench_layer(L, N, D, opts));
  if (out_path.empty()) {
    write_bench_csv(std::cout, rows);
  } else {
    auto out = open_out(out_path);
    write_bench_csv(out, rows);
  }
  return ok;
}

int cmd_kernel_dump(const std::string& ck_path, const std::string& config_path, const std::vector<std::string>& sets,
                    std::size_t layer, bool merged, const std::string& out_path) {
  std::optional<Model> model;
  if (!ck_path.empty()) {
    model.emplace(restore_model(read_checkpoint(ck_path)));
  } else {
    const RunConfig cfg = load_config(config_path, sets);
    TaskSpec probe = cfg.task;  // one example is enough to fix the shapes
    probe.train_size = 1;
    probe.val_size = 0;
    probe.test_size = 0;
    const ModelShape s = model_shape_for(cfg, generate(probe).train);
    model.emplace(model_options(cfg, s.in_dim, s.seq_len, s.classes, s.labels_per_example));
  }
  if (layer >= model->blocks().size())
    throw Error(Errc::shape_error, "model has " + std::to_string(model->blocks().size()) + " layers");
  if (merged) model->set_mode(LayerMode::eval_merged);
  const MRConvLayer& l = model->blocks()[layer].layer();
  if (out_path.empty()) {
    write_kernel_csv(std::cout, l, merged);
  } else {
    auto out = open_out(out_path);
    write_kernel_csv(out, l, merged);
  }
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  // Activations are a few MB each; keep freed blocks in the heap instead of
  // returning them to the kernel on every op.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"Multi-resolution convolution models: training, reparameterisation and checks"};
  app.require_subcommand(1);
  app.footer(
      "Exit codes: 0 ok, 1 verify failure, 2 usage, 3 config, 4 checkpoint, 5 task/model shape mismatch,\n"
      "            6 data format, 7 diverged, 8 numeric precondition, 9 internal error");

  std::vector<std::string> sets;
  DataArgs data_args;
  auto add_data = [&](CLI::App* sub) {
    sub->add_option("--images", data_args.images, "IDX image file to use instead of the synthetic task");
    sub->add_option("--labels", data_args.labels, "IDX label file for --images");
  };

  std::string config_path, out_dir = "run";
  auto* train_cmd = app.add_subcommand("train", "Train a model from a config file");
  train_cmd->add_option("-c,--config", config_path, "YAML run config")->required();
  train_cmd->add_option("--set", sets, "Override a config key, e.g. --set model.depth=4");
  train_cmd->add_option("-o,--out", out_dir, "Output directory (checkpoints, metrics.jsonl)");
  add_data(train_cmd);

  std::string ck_path, split = "test";
  auto* eval_cmd = app.add_subcommand("eval", "Accuracy in branched and merged modes");
  eval_cmd->add_option("checkpoint", ck_path, "Checkpoint file")->required();
  eval_cmd->add_option("--split", split, "Data split")->check(CLI::IsMember({"train", "val", "test"}));
  add_data(eval_cmd);

  std::string reparam_out;
  auto* reparam_cmd = app.add_subcommand("reparam", "Export merged kernels into a checkpoint");
  reparam_cmd->add_option("checkpoint", ck_path, "Checkpoint file")->required();
  reparam_cmd->add_option("-o,--out", reparam_out, "Output file (default: overwrite the input)");

  std::uint64_t seed = 1;
  auto* verify_cmd = app.add_subcommand("verify", "Run the property suite");
  verify_cmd->add_option("--seed", seed, "Seed for the random instances");

  std::vector<std::size_t> Ls{1024, 4096}, Ns{4, 8}, Ds{64};
  BenchOptions bopts;
  std::string kind_name = "fourier", bench_out;
  auto* bench_cmd = app.add_subcommand("bench", "Time branched vs merged forward (CSV)");
  bench_cmd->add_option("--L", Ls, "Sequence lengths")->delimiter(',');
  bench_cmd->add_option("--N", Ns, "Branch counts")->delimiter(',');
  bench_cmd->add_option("--D", Ds, "Channel counts")->delimiter(',');
  bench_cmd->add_option("--kernel", kind_name, "Kernel kind");
  bench_cmd->add_option("--batch", bopts.batch, "Batch size");
  bench_cmd->add_option("--repeats", bopts.repeats, "Timed runs (median reported)");
  bench_cmd->add_option("--warmup", bopts.warmup, "Untimed warmup runs");
  bench_cmd->add_option("-o,--out", bench_out, "CSV file (default: stdout)");

  std::size_t layer = 0;
  bool merged = false;
  std::string dump_out;
  auto* dump_cmd = app.add_subcommand("kernel-dump", "Write layer kernels as CSV");
  auto* ck_opt = dump_cmd->add_option("--checkpoint", ck_path, "Checkpoint file");
  auto* cfg_opt = dump_cmd->add_option("-c,--config", config_path, "Config (freshly initialised model)");
  ck_opt->excludes(cfg_opt);
  dump_cmd->add_option("--set", sets, "Override a config key");
  dump_cmd->add_option("--layer", layer, "Block index");
  dump_cmd->add_flag("--merged", merged, "Dump the merged kernel instead of the branches");
  dump_cmd->add_option("-o,--out", dump_out, "CSV file (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? ok : usage;
  }

  try {
    if (*train_cmd) return cmd_train(config_path, sets, out_dir, data_args);
    if (*eval_cmd) return cmd_eval(ck_path, split, data_args);
    if (*reparam_cmd) return cmd_reparam(ck_path, reparam_out);
    if (*verify_cmd) return cmd_verify(seed);
    if (*bench_cmd) {
      bopts.kind = parse_kernel_kind(kind_name);
      return cmd_bench(Ls, Ns, Ds, bopts, bench_out);
    }
    if (*dump_cmd) {
      if (ck_path.empty() && config_path.empty()) {
        std::cerr << "kernel-dump: give --checkpoint or --config\n";
        return usage;
      }
      return cmd_kernel_dump(ck_path, config_path, sets, layer, merged, dump_out);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return internal;
  }
  return usage;
}
