#include "mrconv/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "mrconv/error.hpp"
#include "mrconv/rng.hpp"

namespace mrconv {

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = begin; i < std::min(end, size()); ++i) idx.push_back(i);
  return gather(idx);
}

Dataset Dataset::gather(const std::vector<std::size_t>& indices) const {
  Dataset out;
  out.labels_per_example = labels_per_example;
  out.classes = classes;
  out.band_limit = band_limit;
  out.x = SeqTensor(indices.size(), channels(), length());
  const std::size_t stride = channels() * length();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t src = indices[i];
    if (src >= size()) throw Error(Errc::shape_error, "dataset index out of range");
    std::copy_n(x.data().begin() + src * stride, stride, out.x.data().begin() + i * stride);
    for (std::size_t k = 0; k < labels_per_example; ++k) out.labels.push_back(labels[src * labels_per_example + k]);
  }
  return out;
}

std::string_view to_string(TaskKind k) noexcept {
  switch (k) {
    case TaskKind::copy_memory: return "copy_memory";
    case TaskKind::adding: return "adding";
    case TaskKind::seq_image: return "seq_image";
    case TaskKind::sine_class: return "sine_class";
  }
  return "unknown";
}

TaskKind parse_task_kind(std::string_view name) {
  for (auto k : {TaskKind::copy_memory, TaskKind::adding, TaskKind::seq_image, TaskKind::sine_class})
    if (name == to_string(k)) return k;
  throw Error(Errc::config_error, "unknown task '" + std::string(name) + "'");
}

namespace {

void standardize(SeqTensor& x) {
  double mean = 0.0, sq = 0.0;
  for (double v : x.data()) mean += v;
  mean /= static_cast<double>(x.size());
  for (double v : x.data()) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(x.size()));
  for (double& v : x.data()) v = sd > 0.0 ? (v - mean) / sd : 0.0;
}

}  // namespace

Splits generate(const TaskSpec& spec) {
  auto make = [&](std::size_t count, std::uint64_t split) -> Dataset {
    const std::uint64_t seed = derive_seed(spec.seed, "data", split);
    switch (spec.kind) {
      case TaskKind::copy_memory: return gen_copy_memory(spec.length, spec.n_symbols, spec.classes, count, seed);
      case TaskKind::adding: return gen_adding(spec.length, spec.classes, count, seed);
      case TaskKind::seq_image: {
        const auto side = static_cast<std::size_t>(std::lround(std::sqrt(double(spec.length))));
        if (side * side != spec.length) throw Error(Errc::config_error, "seq_image length must be a square");
        return gen_seq_image(side, spec.classes, count, seed);
      }
      case TaskKind::sine_class:
        return gen_sine_class(spec.length, spec.classes, spec.band_limit, count, spec.seed, seed);
    }
    throw Error(Errc::config_error, "unknown task kind");
  };
  return {make(spec.train_size, 0), make(spec.val_size, 1), make(spec.test_size, 2)};
}

Dataset gen_copy_memory(std::size_t L, std::size_t n, std::size_t classes, std::size_t count, std::uint64_t seed) {
  if (n == 0 || L <= n + 2) throw Error(Errc::config_error, "copy_memory needs L > n_symbols + 2");
  if (classes < 2) throw Error(Errc::config_error, "copy_memory needs at least two symbols");
  CounterRng rng(seed, stream_id("copy_memory"));
  Dataset ds;
  ds.classes = classes;
  ds.labels_per_example = n;
  ds.x = SeqTensor(count, classes + 1, L);
  for (std::size_t b = 0; b < count; ++b) {
    for (std::size_t j = 0; j < n; ++j) {
      const auto tok = static_cast<int>(rng.below(classes));
      ds.x(b, static_cast<std::size_t>(tok), j) = 1.0;
      ds.labels.push_back(tok);
    }
    for (std::size_t t = L - n; t < L; ++t) ds.x(b, classes, t) = 1.0;
  }
  return ds;
}

Dataset gen_adding(std::size_t L, std::size_t classes, std::size_t count, std::uint64_t seed) {
  if (L < 4) throw Error(Errc::config_error, "adding needs L >= 4");
  CounterRng rng(seed, stream_id("adding"));
  Dataset ds;
  ds.classes = classes;
  ds.x = SeqTensor(count, 2, L);
  for (std::size_t b = 0; b < count; ++b) {
    for (std::size_t t = 0; t < L; ++t) ds.x(b, 0, t) = rng.uniform();
    const std::size_t p = rng.below(L / 2), q = L / 2 + rng.below(L - L / 2);
    ds.x(b, 1, p) = 1.0;
    ds.x(b, 1, q) = 1.0;
    const double s = ds.x(b, 0, p) + ds.x(b, 0, q);
    ds.labels.push_back(static_cast<int>(std::min<double>(double(classes - 1), std::floor(s / 2.0 * double(classes)))));
  }
  return ds;
}

Dataset gen_seq_image(std::size_t side, std::size_t classes, std::size_t count, std::uint64_t seed) {
  if (side < 4) throw Error(Errc::config_error, "seq_image needs side >= 4");
  CounterRng rng(seed, stream_id("seq_image"));
  Dataset ds;
  ds.classes = classes;
  ds.x = SeqTensor(count, 1, side * side);
  const double half = 0.5 * double(side - 1);
  for (std::size_t b = 0; b < count; ++b) {
    const auto c = static_cast<int>(rng.below(classes));
    const double angle = std::numbers::pi * (double(c) + 0.3 * (rng.uniform() - 0.5)) / double(classes);
    const double cx = half + 0.2 * double(side) * (rng.uniform() - 0.5);
    const double cy = half + 0.2 * double(side) * (rng.uniform() - 0.5);
    const double nx = -std::sin(angle), ny = std::cos(angle);
    for (std::size_t r = 0; r < side; ++r)
      for (std::size_t col = 0; col < side; ++col) {
        const double dist = (double(col) - cx) * nx + (double(r) - cy) * ny;
        ds.x(b, 0, r * side + col) = std::exp(-dist * dist / 2.0) + 0.2 * rng.normal();
      }
    ds.labels.push_back(c);
  }
  standardize(ds.x);
  return ds;
}

Dataset gen_sine_class(std::size_t L, std::size_t classes, std::size_t band_limit, std::size_t count,
                       std::uint64_t seed, std::uint64_t example_seed) {
  if (band_limit == 0 || 2 * band_limit >= L)
    throw Error(Errc::invalid_band_limit, "band limit must be in [1, L/2)");
  if (classes < 2 || band_limit < classes)
    throw Error(Errc::config_error, "sine_class needs 2 <= classes <= band_limit");
  // Class templates depend only on the task seed so every split shares them.
  CounterRng tpl(seed, stream_id("sine-templates"));
  struct Component {
    double freq, amp;
  };
  std::vector<std::vector<Component>> templates(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    const double f = 1.0 + std::round(double(c) * double(band_limit - 1) / double(classes - 1));
    templates[c].push_back({f, 1.0});
    templates[c].push_back({double(1 + tpl.below(band_limit)), 0.4 + 0.2 * tpl.uniform()});
  }
  CounterRng rng(example_seed, stream_id("sine_class"));
  Dataset ds;
  ds.classes = classes;
  ds.band_limit = band_limit;
  ds.x = SeqTensor(count, 1, L);
  const double tau = 2.0 * std::numbers::pi;
  for (std::size_t b = 0; b < count; ++b) {
    const auto c = static_cast<int>(rng.below(classes));
    auto lane = ds.x.lane(b, 0);
    auto add_tone = [&](double f, double a, double phase) {
      for (std::size_t t = 0; t < L; ++t) lane[t] += a * std::cos(tau * f * double(t) / double(L) + phase);
    };
    for (const auto& comp : templates[static_cast<std::size_t>(c)])
      add_tone(comp.freq, comp.amp * (0.8 + 0.4 * rng.uniform()), tau * rng.uniform());
    for (std::size_t f = 1; f <= band_limit; ++f) add_tone(double(f), 0.15 * std::abs(rng.normal()), tau * rng.uniform());
    ds.labels.push_back(c);
  }
  return ds;
}

Dataset downsample(const Dataset& ds, std::size_t factor) {
  if (factor == 0) throw Error(Errc::invalid_band_limit, "decimation factor must be positive");
  if (factor == 1) return ds;
  if (ds.band_limit == 0 || 2 * factor * ds.band_limit >= ds.length())
    throw Error(Errc::invalid_band_limit, "band limit " + std::to_string(ds.band_limit) + " aliases when decimating length " +
                                              std::to_string(ds.length()) + " by " + std::to_string(factor));
  if (ds.length() % factor != 0) throw Error(Errc::invalid_band_limit, "decimation factor must divide the length");
  Dataset out = ds;
  out.x = SeqTensor(ds.size(), ds.channels(), ds.length() / factor);
  for (std::size_t b = 0; b < ds.size(); ++b)
    for (std::size_t d = 0; d < ds.channels(); ++d)
      for (std::size_t t = 0; t < out.length(); ++t) out.x(b, d, t) = ds.x(b, d, t * factor);
  return out;
}

// ---------------------------------------------------------------- IDX

namespace {

std::size_t idx_width(std::uint8_t type) {
  switch (type) {
    case 0x08:
    case 0x09: return 1;
    case 0x0B: return 2;
    case 0x0C:
    case 0x0D: return 4;
    case 0x0E: return 8;
  }
  throw Error(Errc::format_error, "unknown IDX element type 0x" + std::to_string(type));
}

template <class T>
T load_be(const unsigned char* p) {
  using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
            std::conditional_t<sizeof(T) == 2, std::uint16_t,
            std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
  U u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u = static_cast<U>((u << 8) | p[i]);
  return std::bit_cast<T>(u);
}

template <class T>
void store_be(T value, unsigned char* p) {
  using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
            std::conditional_t<sizeof(T) == 2, std::uint16_t,
            std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
  U u = std::bit_cast<U>(value);
  for (std::size_t i = sizeof(T); i-- > 0;) {
    p[i] = static_cast<unsigned char>(u & 0xff);
    u = static_cast<U>(u >> 8);
  }
}

}  // namespace

IdxArray read_idx(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::format_error, "cannot open IDX file " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 4 || bytes[0] != 0 || bytes[1] != 0)
    throw Error(Errc::format_error, path.string() + ": bad IDX magic");
  IdxArray a;
  a.type = bytes[2];
  const std::size_t width = idx_width(a.type);
  const std::size_t rank = bytes[3];
  if (rank == 0 || bytes.size() < 4 + 4 * rank) throw Error(Errc::format_error, path.string() + ": truncated IDX header");
  std::size_t n = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    a.dims.push_back(load_be<std::uint32_t>(&bytes[4 + 4 * i]));
    n *= a.dims.back();
  }
  const std::size_t offset = 4 + 4 * rank;
  if (bytes.size() != offset + n * width)
    throw Error(Errc::format_error, path.string() + ": payload size does not match the IDX dimensions");
  a.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* p = &bytes[offset + i * width];
    switch (a.type) {
      case 0x08: a.values[i] = p[0]; break;
      case 0x09: a.values[i] = static_cast<std::int8_t>(p[0]); break;
      case 0x0B: a.values[i] = load_be<std::int16_t>(p); break;
      case 0x0C: a.values[i] = load_be<std::int32_t>(p); break;
      case 0x0D: a.values[i] = load_be<float>(p); break;
      case 0x0E: a.values[i] = load_be<double>(p); break;
    }
  }
  return a;
}

void write_idx(const std::filesystem::path& path, const IdxArray& a) {
  const std::size_t width = idx_width(a.type);
  std::size_t n = 1;
  for (auto d : a.dims) n *= d;
  if (a.dims.empty() || a.dims.size() > 255 || n != a.values.size())
    throw Error(Errc::format_error, "IDX dimensions do not match the values");
  std::vector<unsigned char> bytes(4 + 4 * a.dims.size() + n * width);
  bytes[2] = a.type;
  bytes[3] = static_cast<unsigned char>(a.dims.size());
  for (std::size_t i = 0; i < a.dims.size(); ++i) store_be<std::uint32_t>(a.dims[i], &bytes[4 + 4 * i]);
  unsigned char* p = bytes.data() + 4 + 4 * a.dims.size();
  for (double v : a.values) {
    switch (a.type) {
      case 0x08: *p = static_cast<std::uint8_t>(v); break;
      case 0x09: *p = static_cast<unsigned char>(static_cast<std::int8_t>(v)); break;
      case 0x0B: store_be(static_cast<std::int16_t>(v), p); break;
      case 0x0C: store_be(static_cast<std::int32_t>(v), p); break;
      case 0x0D: store_be(static_cast<float>(v), p); break;
      case 0x0E: store_be(v, p); break;
    }
    p += width;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::format_error, "cannot write IDX file " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Dataset ingest_idx(const std::filesystem::path& images, const std::filesystem::path& labels, bool normalize) {
  const IdxArray img = read_idx(images);
  std::size_t N, H, W, C;
  if (img.dims.size() == 3) {
    N = img.dims[0], H = img.dims[1], W = img.dims[2], C = 1;
  } else if (img.dims.size() == 4) {
    N = img.dims[0], H = img.dims[1], W = img.dims[2], C = img.dims[3];
  } else {
    throw Error(Errc::format_error, images.string() + ": expected (N, H, W) or (N, H, W, C) images");
  }
  Dataset ds;
  ds.x = SeqTensor(N, C, H * W);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < H * W; ++p)
      for (std::size_t c = 0; c < C; ++c) ds.x(n, c, p) = img.values[(n * H * W + p) * C + c];
  if (normalize) standardize(ds.x);
  if (labels.empty()) {
    ds.labels.assign(N, 0);
    ds.classes = 1;
  } else {
    const IdxArray lab = read_idx(labels);
    if (lab.dims.size() != 1 || lab.dims[0] != N)
      throw Error(Errc::format_error, labels.string() + ": expected one label per image");
    int top = 0;
    for (double v : lab.values) {
      ds.labels.push_back(static_cast<int>(v));
      top = std::max(top, ds.labels.back());
    }
    ds.classes = static_cast<std::size_t>(top) + 1;
  }
  return ds;
}

}  // namespace mrconv
