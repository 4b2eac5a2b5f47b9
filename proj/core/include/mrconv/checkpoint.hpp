#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mrconv/config.hpp"
#include "mrconv/model.hpp"
#include "mrconv/params.hpp"

namespace mrconv {

struct ManifestEntry {
  std::string name;
  std::vector<std::size_t> shape;
  ParamGroup group = ParamGroup::other;

  bool operator==(const ManifestEntry&) const = default;
};

/// Dimensions the model was built for; needed to rebuild it on load.
struct ModelShape {
  std::size_t in_dim = 1;
  std::size_t seq_len = 0;
  std::size_t classes = 2;
  std::size_t labels_per_example = 1;

  bool operator==(const ModelShape&) const = default;
};

/// Binary layout (all integers and floats little-endian):
///   "MRCONVCK" | u32 version | u64 header bytes | JSON header |
///   f64 parameters (manifest order) | f64 merged kernels (merged manifest order)
/// The header carries the config echo, both manifests, the seeds and an
/// FNV-1a hash of each payload.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string config_yaml;
  ModelShape shape;
  std::uint64_t step = 0;
  std::map<std::string, std::uint64_t> seeds;
  std::vector<ManifestEntry> manifest;
  std::vector<double> payload;
  std::vector<ManifestEntry> merged_manifest;  // empty unless exported
  std::vector<double> merged_payload;

  bool has_merged() const noexcept { return !merged_manifest.empty(); }
};

/// FNV-1a over the little-endian bytes of the values.
std::uint64_t payload_hash(const std::vector<double>& values) noexcept;

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck);
/// Throws CheckpointError on bad magic, version, truncated data or a hash
/// mismatch; the config echo is re-validated (ConfigError).
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Snapshot of a model's parameters and buffers. With `merged`, every layer
/// is reparameterised and its merged kernel exported as well.
Checkpoint make_checkpoint(Model& model, const RunConfig& config, const ModelShape& shape, std::uint64_t step,
                           bool merged = false);

/// Rebuilds the model described by the checkpoint and loads its parameters.
/// A manifest that does not match the rebuilt model throws ShapeError.
Model restore_model(const Checkpoint& ck);

/// Installs the exported merged kernels into an eval_merged model.
void adopt_merged(Model& model, const Checkpoint& ck);

}  // namespace mrconv
