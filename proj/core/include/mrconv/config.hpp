#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mrconv/conv.hpp"
#include "mrconv/data.hpp"
#include "mrconv/kernels.hpp"
#include "mrconv/model.hpp"

namespace mrconv {

struct ModelConfig {
  KernelKind kernel = KernelKind::fourier;
  std::size_t depth = 2;
  std::size_t features = 32;     // D
  std::size_t kernel_size = 8;   // l0
  std::size_t num_branches = 0;  // 0 = as many as the sequence length allows
  bool bidirectional = false;
  NormKind norm = NormKind::batch;
  bool prenorm = true;
  double dropout = 0.0;
  MergeStyle merge_style = MergeStyle::sum;
  double fixed_decay = 0.5;
  PoolKind pool = PoolKind::mean;
  ConvStrategy engine = ConvStrategy::automatic;
};

struct OptimConfig {
  double lr = 3e-3;
  double kernel_lr = 1e-3;
  double weight_decay = 0.05;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  std::size_t warmup = 0;      // steps
  std::size_t eval_every = 0;  // steps; 0 = once per epoch
};

/// One run: model, optimiser and task, with every random stream derived from
/// `seed`.
struct RunConfig {
  ModelConfig model;
  OptimConfig optim;
  TaskSpec task;  // task.seed mirrors `seed`
  std::uint64_t seed = 0;
};

/// Parses YAML text with sections `model`, `optim`, `task` and a top-level
/// `seed`. Unknown keys, wrong types and out-of-range values throw ConfigError.
/// Each override is `section.key=value` (or `seed=value`) with a YAML scalar
/// value and is applied before validation.
RunConfig parse_config(std::string_view yaml, const std::vector<std::string>& overrides = {});
RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

/// Canonical YAML with every key; parse_config(to_yaml(c)) == c.
std::string to_yaml(const RunConfig& config);

void validate(const RunConfig& config);

/// Model options for a dataset with the given channel count and length.
ModelOptions model_options(const RunConfig& config, std::size_t in_dim, std::size_t seq_len, std::size_t classes,
                           std::size_t labels_per_example);
AdamWOptions adamw_options(const RunConfig& config);

std::string_view to_string(ConvStrategy s) noexcept;
ConvStrategy parse_conv_strategy(std::string_view name);

bool operator==(const ModelConfig&, const ModelConfig&);
bool operator==(const OptimConfig&, const OptimConfig&);
bool operator==(const RunConfig&, const RunConfig&);

}  // namespace mrconv
