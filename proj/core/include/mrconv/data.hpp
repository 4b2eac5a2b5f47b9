#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mrconv/tensor.hpp"

namespace mrconv {

/// Inputs (N, C, L) with labels_per_example labels per sequence, stored
/// example-major.
struct Dataset {
  SeqTensor x;
  std::vector<int> labels;
  std::size_t labels_per_example = 1;
  std::size_t classes = 2;
  std::size_t band_limit = 0;  // highest frequency (cycles per sequence); 0 = not band-limited

  std::size_t size() const noexcept { return x.batch(); }
  std::size_t length() const noexcept { return x.length(); }
  std::size_t channels() const noexcept { return x.channels(); }

  /// Examples [begin, end) as a new dataset.
  Dataset slice(std::size_t begin, std::size_t end) const;
  /// Examples in the given order.
  Dataset gather(const std::vector<std::size_t>& indices) const;
};

enum class TaskKind { copy_memory, adding, seq_image, sine_class };

std::string_view to_string(TaskKind k) noexcept;
TaskKind parse_task_kind(std::string_view name);

struct TaskSpec {
  TaskKind kind = TaskKind::copy_memory;
  std::size_t length = 256;
  std::size_t classes = 8;
  std::size_t n_symbols = 8;   // copy_memory
  std::size_t band_limit = 8;  // sine_class
  std::size_t train_size = 2048;
  std::size_t val_size = 256;
  std::size_t test_size = 512;
  std::uint64_t seed = 0;
};

struct Splits {
  Dataset train, val, test;
};

/// Regenerates all splits deterministically from the spec.
Splits generate(const TaskSpec& spec);

/// n_symbols one-hot tokens (alphabet `classes`) at the start, silence, then a
/// recall marker on the last n_symbols steps, which must reproduce the tokens.
/// Channels: classes token channels + 1 marker channel.
Dataset gen_copy_memory(std::size_t length, std::size_t n_symbols, std::size_t classes, std::size_t count,
                        std::uint64_t seed);

/// Two channels: uniform values and a marker on one position in each half.
/// The marked sum in [0, 2) is bucketed into `classes` equal bins.
Dataset gen_adding(std::size_t length, std::size_t classes, std::size_t count, std::uint64_t seed);

/// side x side images of a blurred bar whose orientation (one of `classes`)
/// is the label, flattened row-major and standardised. length = side^2.
Dataset gen_seq_image(std::size_t side, std::size_t classes, std::size_t count, std::uint64_t seed);

/// Band-limited waveforms: each class has a characteristic frequency set
/// (fixed by `seed`), examples draw random phases and amplitudes plus
/// band-limited noise. Every component has frequency <= band_limit, which
/// must be below length / 2.
Dataset gen_sine_class(std::size_t length, std::size_t classes, std::size_t band_limit, std::size_t count,
                       std::uint64_t seed, std::uint64_t example_seed);

/// Keeps every factor-th sample. Requires band_limit < length / (2 factor)
/// (InvalidBandLimit otherwise); factor 1 is the identity.
Dataset downsample(const Dataset& ds, std::size_t factor);

/// Raw IDX array: big-endian header, element type code and dimensions.
struct IdxArray {
  std::uint8_t type = 0x08;  // 0x08 u8, 0x09 i8, 0x0B i16, 0x0C i32, 0x0D f32, 0x0E f64
  std::vector<std::uint32_t> dims;
  std::vector<double> values;
};

IdxArray read_idx(const std::filesystem::path& path);
void write_idx(const std::filesystem::path& path, const IdxArray& array);

/// Images (N, H, W) or (N, H, W, C) flattened to (N, C, H*W), standardised to
/// zero mean and unit variance over the whole set. Labels come from an IDX
/// vector when `labels` is non-empty, else they are all zero.
Dataset ingest_idx(const std::filesystem::path& images, const std::filesystem::path& labels = {},
                   bool normalize = true);

}  // namespace mrconv
