#include "mrconv/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "mrconv/error.hpp"
#include "mrconv/rng.hpp"

namespace mrconv {

namespace {

using json = nlohmann::json;

constexpr char kMagic[8] = {'M', 'R', 'C', 'O', 'N', 'V', 'C', 'K'};

[[noreturn]] void corrupt(const std::string& what) { throw Error(Errc::checkpoint_error, what); }

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p, int bytes = 8) {
  std::uint64_t v = 0;
  for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::string hex(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

json manifest_json(const std::vector<ManifestEntry>& m) {
  json arr = json::array();
  for (const auto& e : m) arr.push_back({{"name", e.name}, {"shape", e.shape}, {"group", std::string(to_string(e.group))}});
  return arr;
}

std::vector<ManifestEntry> manifest_from(const json& arr) {
  std::vector<ManifestEntry> m;
  for (const auto& e : arr) {
    ManifestEntry entry;
    entry.name = e.at("name").get<std::string>();
    entry.shape = e.at("shape").get<std::vector<std::size_t>>();
    entry.group = parse_param_group(e.at("group").get<std::string>());
    m.push_back(std::move(entry));
  }
  return m;
}

std::size_t manifest_size(const std::vector<ManifestEntry>& m) {
  std::size_t n = 0;
  for (const auto& e : m) n += shape_size(e.shape);
  return n;
}

void put_values(std::vector<std::uint8_t>& out, const std::vector<double>& values) {
  for (double v : values) put_u64(out, std::bit_cast<std::uint64_t>(v));
}

}  // namespace

std::uint64_t payload_hash(const std::vector<double>& values) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : values) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i, bits >>= 8) {
      h ^= bits & 0xff;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  if (manifest_size(ck.manifest) != ck.payload.size()) corrupt("payload does not match the manifest");
  if (manifest_size(ck.merged_manifest) != ck.merged_payload.size())
    corrupt("merged payload does not match the merged manifest");
  json header = {
      {"version", Checkpoint::kVersion},
      {"config", ck.config_yaml},
      {"model_shape",
       {{"in_dim", ck.shape.in_dim},
        {"seq_len", ck.shape.seq_len},
        {"classes", ck.shape.classes},
        {"labels_per_example", ck.shape.labels_per_example}}},
      {"step", ck.step},
      {"seeds", ck.seeds},
      {"manifest", manifest_json(ck.manifest)},
      {"payload", {{"count", ck.payload.size()}, {"fnv1a", hex(payload_hash(ck.payload))}}},
      {"merged_manifest", manifest_json(ck.merged_manifest)},
      {"merged_payload", {{"count", ck.merged_payload.size()}, {"fnv1a", hex(payload_hash(ck.merged_payload))}}},
  };
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(Checkpoint::kVersion >> (8 * i)));
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  put_values(out, ck.payload);
  put_values(out, ck.merged_payload);
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, 8) != 0) corrupt("not a checkpoint (bad magic)");
  const auto version = static_cast<std::uint32_t>(get_u64(bytes.data() + 8, 4));
  if (version != Checkpoint::kVersion) corrupt("unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t header_len = get_u64(bytes.data() + 12);
  if (header_len > bytes.size() - 20) corrupt("truncated header");
  json header;
  try {
    header = json::parse(bytes.begin() + 20, bytes.begin() + 20 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    corrupt(std::string("malformed header: ") + e.what());
  }

  Checkpoint ck;
  std::uint64_t count = 0, merged_count = 0;
  std::string hash, merged_hash;
  try {
    if (header.at("version").get<std::uint32_t>() != version) corrupt("header version disagrees with the preamble");
    ck.config_yaml = header.at("config").get<std::string>();
    const auto& s = header.at("model_shape");
    ck.shape = {s.at("in_dim").get<std::size_t>(), s.at("seq_len").get<std::size_t>(),
                s.at("classes").get<std::size_t>(), s.at("labels_per_example").get<std::size_t>()};
    ck.step = header.at("step").get<std::uint64_t>();
    ck.seeds = header.at("seeds").get<std::map<std::string, std::uint64_t>>();
    ck.manifest = manifest_from(header.at("manifest"));
    ck.merged_manifest = manifest_from(header.at("merged_manifest"));
    count = header.at("payload").at("count").get<std::uint64_t>();
    hash = header.at("payload").at("fnv1a").get<std::string>();
    merged_count = header.at("merged_payload").at("count").get<std::uint64_t>();
    merged_hash = header.at("merged_payload").at("fnv1a").get<std::string>();
  } catch (const json::exception& e) {
    corrupt(std::string("malformed header: ") + e.what());
  } catch (const Error& e) {
    corrupt(e.what());
  }
  if (count != manifest_size(ck.manifest) || merged_count != manifest_size(ck.merged_manifest))
    corrupt("payload counts disagree with the manifest");
  const std::size_t offset = 20 + header_len;
  if (bytes.size() != offset + 8 * (count + merged_count)) corrupt("payload size mismatch (truncated or trailing data)");
  auto read_values = [&](std::size_t at, std::size_t n) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = std::bit_cast<double>(get_u64(bytes.data() + at + 8 * i));
    return v;
  };
  ck.payload = read_values(offset, count);
  ck.merged_payload = read_values(offset + 8 * count, merged_count);
  if (hex(payload_hash(ck.payload)) != hash) corrupt("parameter payload hash mismatch");
  if (hex(payload_hash(ck.merged_payload)) != merged_hash) corrupt("merged payload hash mismatch");
  parse_config(ck.config_yaml);  // the echo must still satisfy the schema
  return ck;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto bytes = encode_checkpoint(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) corrupt("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) corrupt("short write to " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) corrupt("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

Checkpoint make_checkpoint(Model& model, const RunConfig& config, const ModelShape& shape, std::uint64_t step,
                           bool merged) {
  Checkpoint ck;
  ck.config_yaml = to_yaml(config);
  ck.shape = shape;
  ck.step = step;
  ck.seeds = {{"run", config.seed},
              {"data", derive_seed(config.seed, "data")},
              {"init", derive_seed(config.seed, "init")},
              {"dropout", derive_seed(config.seed, "dropout")}};
  for (const auto& p : model.parameters()) {
    ck.manifest.push_back({p.name, p.shape, p.group});
    ck.payload.insert(ck.payload.end(), p.value.begin(), p.value.end());
  }
  model.parameters_changed();
  if (merged) {
    const LayerMode previous = model.mode();
    model.set_mode(LayerMode::eval_merged);
    for (std::size_t i = 0; i < model.blocks().size(); ++i) {
      const MergedConv& m = *model.blocks()[i].layer().merged();
      const std::string prefix = "blocks." + std::to_string(i) + ".conv.merged.";
      auto add = [&](const std::string& name, std::vector<std::size_t> shp, std::span<const double> values) {
        ck.merged_manifest.push_back({prefix + name, std::move(shp), ParamGroup::buffer});
        ck.merged_payload.insert(ck.merged_payload.end(), values.begin(), values.end());
      };
      add("kernel", {m.kernel.rows(), m.kernel.cols()}, m.kernel.data());
      add("bias", {m.bias.size()}, m.bias);
      if (m.bidirectional())
        add("backward_kernel", {m.backward_kernel.rows(), m.backward_kernel.cols()}, m.backward_kernel.data());
    }
    model.set_mode(previous);
  }
  return ck;
}

Model restore_model(const Checkpoint& ck) {
  const RunConfig config = parse_config(ck.config_yaml);
  Model model(model_options(config, ck.shape.in_dim, ck.shape.seq_len, ck.shape.classes, ck.shape.labels_per_example));
  auto params = model.parameters();
  if (params.size() != ck.manifest.size())
    throw Error(Errc::shape_error, "checkpoint has " + std::to_string(ck.manifest.size()) + " tensors, model expects " +
                                       std::to_string(params.size()));
  std::size_t at = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = ck.manifest[i];
    if (e.name != params[i].name || e.shape != params[i].shape || e.group != params[i].group)
      throw Error(Errc::shape_error, "checkpoint tensor '" + e.name + "' does not match model tensor '" +
                                         params[i].name + "'");
    std::copy_n(ck.payload.begin() + static_cast<std::ptrdiff_t>(at), params[i].value.size(), params[i].value.begin());
    at += params[i].value.size();
  }
  model.parameters_changed();
  return model;
}

void adopt_merged(Model& model, const Checkpoint& ck) {
  if (!ck.has_merged()) throw Error(Errc::checkpoint_error, "checkpoint has no merged kernels");
  if (model.mode() != LayerMode::eval_merged) model.set_mode(LayerMode::eval_merged);
  std::size_t at = 0, entry = 0;
  auto take = [&](const std::string& name) -> std::pair<const ManifestEntry*, std::span<const double>> {
    if (entry >= ck.merged_manifest.size() || ck.merged_manifest[entry].name != name)
      throw Error(Errc::shape_error, "merged manifest lacks '" + name + "'");
    const auto& e = ck.merged_manifest[entry++];
    std::span<const double> v(ck.merged_payload.data() + at, shape_size(e.shape));
    at += v.size();
    return {&e, v};
  };
  for (std::size_t i = 0; i < model.blocks().size(); ++i) {
    auto& layer = model.blocks()[i].layer();
    const std::string prefix = "blocks." + std::to_string(i) + ".conv.merged.";
    MergedConv m;
    auto [ke, kv] = take(prefix + "kernel");
    if (ke->shape.size() != 2) throw Error(Errc::shape_error, "merged kernel must be 2-D");
    m.kernel = Matrix(ke->shape[0], ke->shape[1]);
    std::copy(kv.begin(), kv.end(), m.kernel.data().begin());
    auto [be, bv] = take(prefix + "bias");
    m.bias.assign(bv.begin(), bv.end());
    if (layer.bidirectional()) {
      auto [we, wv] = take(prefix + "backward_kernel");
      if (we->shape.size() != 2) throw Error(Errc::shape_error, "merged kernel must be 2-D");
      m.backward_kernel = Matrix(we->shape[0], we->shape[1]);
      std::copy(wv.begin(), wv.end(), m.backward_kernel.data().begin());
    }
    layer.adopt_merged(std::move(m));
  }
  if (entry != ck.merged_manifest.size()) throw Error(Errc::shape_error, "merged manifest has extra tensors");
}

}  // namespace mrconv
