#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mrconv/checkpoint.hpp"
#include "mrconv/config.hpp"
#include "mrconv/data.hpp"
#include "mrconv/model.hpp"

namespace mrconv {

struct MetricRecord {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;      // mean training loss since the previous record
  double accuracy = 0.0;  // validation accuracy (test split when there is no validation split)
};

/// One self-contained JSON object per line.
std::string to_json_line(const MetricRecord& r);

struct TrainOptions {
  std::ostream* metrics = nullptr;           // JSON lines sink
  std::filesystem::path checkpoint_dir;      // empty = no checkpoints
  std::function<void(const MetricRecord&)> on_eval;
};

struct TrainResult {
  Model model;
  ModelShape shape;
  std::vector<MetricRecord> log;
  std::uint64_t steps = 0;
  double test_accuracy = 0.0;
};

/// Shape the model needs for a dataset; throws ShapeError when the pooling
/// cannot produce the dataset's labels.
ModelShape model_shape_for(const RunConfig& config, const Dataset& ds);

/// AdamW with linear warmup and cosine decay over epochs x batches. Each
/// epoch reshuffles the training split; dropout masks are seeded per step.
TrainResult train(const RunConfig& config, const Splits& data, const TrainOptions& options = {});

/// Fraction of labels predicted correctly in the model's current mode.
double accuracy(Model& model, const Dataset& ds, std::size_t batch = 128);

/// Logits for a whole dataset in the model's current mode, (N*K x classes).
Matrix dataset_logits(Model& model, const Dataset& ds, std::size_t batch = 128);

struct ModeReport {
  double branched_accuracy = 0.0;
  double merged_accuracy = 0.0;
  double max_logit_divergence = 0.0;  // max |branched - merged| over all logits
};

/// Accuracy in eval-branched and eval-merged modes. When `exported` is given
/// its merged kernels are used instead of re-merging. Leaves the model in
/// eval_merged mode.
ModeReport evaluate_modes(Model& model, const Dataset& ds, const Checkpoint* exported = nullptr);

}  // namespace mrconv
