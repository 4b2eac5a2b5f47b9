#include "mrconv/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "json.hpp"
#include "mrconv/error.hpp"
#include "mrconv/rng.hpp"

namespace mrconv {

std::string to_json_line(const MetricRecord& r) {
  nlohmann::ordered_json j = {
      {"step", r.step}, {"epoch", r.epoch}, {"lr", r.lr}, {"loss", r.loss}, {"accuracy", r.accuracy}};
  return j.dump();
}

ModelShape model_shape_for(const RunConfig& config, const Dataset& ds) {
  if (ds.labels_per_example > 1 && config.model.pool != PoolKind::last)
    throw Error(Errc::shape_error, "task has " + std::to_string(ds.labels_per_example) +
                                       " labels per example; model.pool must be 'last'");
  if (ds.labels_per_example > ds.length()) throw Error(Errc::shape_error, "more labels than time steps");
  return {ds.channels(), ds.length(), ds.classes, ds.labels_per_example};
}

Matrix dataset_logits(Model& model, const Dataset& ds, std::size_t batch) {
  const std::size_t K = model.labels_per_example(), C = model.options().classes;
  if (ds.channels() != model.options().in_dim || ds.length() != model.options().seq_len)
    throw Error(Errc::shape_error, "dataset (" + std::to_string(ds.channels()) + " channels, length " +
                                       std::to_string(ds.length()) + ") does not match the model");
  Matrix out(ds.size() * K, C);
  for (std::size_t b = 0; b < ds.size(); b += batch) {
    const Dataset part = ds.slice(b, b + batch);
    const Matrix l = model.logits(part.x);
    std::copy(l.data().begin(), l.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * K * C));
  }
  return out;
}

namespace {

double accuracy_of(const Matrix& logits, const std::vector<int>& labels) {
  std::size_t correct = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    correct += best == labels[r];
  }
  return labels.empty() ? 0.0 : double(correct) / double(labels.size());
}

}  // namespace

double accuracy(Model& model, const Dataset& ds, std::size_t batch) {
  return accuracy_of(dataset_logits(model, ds, batch), ds.labels);
}

ModeReport evaluate_modes(Model& model, const Dataset& ds, const Checkpoint* exported) {
  ModeReport r;
  model.set_mode(LayerMode::eval_branched);
  const Matrix branched = dataset_logits(model, ds);
  model.set_mode(LayerMode::eval_merged);
  if (exported) adopt_merged(model, *exported);
  const Matrix merged = dataset_logits(model, ds);
  r.branched_accuracy = accuracy_of(branched, ds.labels);
  r.merged_accuracy = accuracy_of(merged, ds.labels);
  for (std::size_t i = 0; i < branched.size(); ++i)
    r.max_logit_divergence = std::max(r.max_logit_divergence, std::abs(branched.data()[i] - merged.data()[i]));
  return r;
}

TrainResult train(const RunConfig& config, const Splits& data, const TrainOptions& options) {
  validate(config);
  const Dataset& tr = data.train;
  const ModelShape shape = model_shape_for(config, tr);
  TrainResult result{Model(model_options(config, shape.in_dim, shape.seq_len, shape.classes, shape.labels_per_example)),
                     shape, {}, 0, 0.0};
  Model& model = result.model;
  auto params = model.parameters();
  AdamW opt(adamw_options(config));

  const std::size_t B = config.optim.batch_size;
  const std::size_t per_epoch = (tr.size() + B - 1) / B;
  const std::size_t total = per_epoch * config.optim.epochs;
  const std::size_t eval_every = config.optim.eval_every ? config.optim.eval_every : per_epoch;
  const Dataset& monitor = data.val.size() ? data.val : data.test;
  const std::uint64_t data_seed = derive_seed(config.seed, "data");
  const std::uint64_t dropout_seed = derive_seed(config.seed, "dropout");

  if (!options.checkpoint_dir.empty()) std::filesystem::create_directories(options.checkpoint_dir);

  std::vector<std::size_t> order(tr.size());
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < config.optim.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng shuffle(data_seed, stream_id("shuffle") + epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    for (std::size_t b = 0; b < per_epoch; ++b, ++step) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b * B),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(tr.size(), (b + 1) * B)));
      const Dataset batch = tr.gather(idx);
      model.set_mode(LayerMode::train);
      const ForwardContext ctx{derive_seed(dropout_seed, "step", step)};
      const auto lg = loss_and_gradients(model, params, batch.x, batch.labels, ctx);
      if (!std::isfinite(lg.loss)) throw Error(Errc::non_finite, "loss is not finite at step " + std::to_string(step));
      const double scale = config.optim.warmup ? lr_schedule(step + 1, total, config.optim.warmup, 1.0)
                                               : lr_schedule(step, total, 0, 1.0);
      opt.step(params, lg.grads, scale);
      model.parameters_changed();
      loss_sum += lg.loss;
      ++loss_count;

      const bool last = step + 1 == total;
      if ((step + 1) % eval_every == 0 || last) {
        // Monitoring uses the merged form: same logits, one convolution per layer.
        model.set_mode(LayerMode::eval_merged);
        MetricRecord rec{step + 1, epoch, scale * config.optim.lr, loss_sum / double(loss_count),
                         monitor.size() ? accuracy(model, monitor) : 0.0};
        loss_sum = 0.0;
        loss_count = 0;
        result.log.push_back(rec);
        if (options.metrics) *options.metrics << to_json_line(rec) << '\n' << std::flush;
        if (options.on_eval) options.on_eval(rec);
        if (!options.checkpoint_dir.empty())
          write_checkpoint(options.checkpoint_dir / "last.ckpt", make_checkpoint(model, config, shape, step + 1));
        params = model.parameters();
      }
    }
  }
  result.steps = step;
  model.set_mode(LayerMode::eval_merged);
  result.test_accuracy = data.test.size() ? accuracy(model, data.test) : 0.0;
  if (!options.checkpoint_dir.empty())
    write_checkpoint(options.checkpoint_dir / "final.ckpt", make_checkpoint(model, config, shape, step));
  return result;
}

}  // namespace mrconv
