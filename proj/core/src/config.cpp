#include "mrconv/config.hpp"

#include <yaml-cpp/yaml.h>

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "mrconv/error.hpp"
#include "mrconv/rng.hpp"

namespace mrconv {

std::string_view to_string(ConvStrategy s) noexcept {
  switch (s) {
    case ConvStrategy::automatic: return "auto";
    case ConvStrategy::direct: return "direct";
    case ConvStrategy::fft: return "fft";
  }
  return "auto";
}

ConvStrategy parse_conv_strategy(std::string_view name) {
  if (name == "auto" || name == "automatic") return ConvStrategy::automatic;
  if (name == "direct") return ConvStrategy::direct;
  if (name == "fft") return ConvStrategy::fft;
  throw Error(Errc::config_error, "unknown engine '" + std::string(name) + "' (auto|direct|fft)");
}

namespace {

[[noreturn]] void fail(const std::string& key, const std::string& what) {
  throw Error(Errc::config_error, key + ": " + what);
}

std::string scalar(const YAML::Node& n, const std::string& key) {
  if (!n.IsScalar()) fail(key, "expected a scalar");
  return n.Scalar();
}

std::size_t as_count(const YAML::Node& n, const std::string& key) {
  const std::string s = scalar(n, key);
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &pos, 0);
  } catch (const std::exception&) {
    fail(key, "expected a non-negative integer, got '" + s + "'");
  }
  if (pos != s.size() || v < 0) fail(key, "expected a non-negative integer, got '" + s + "'");
  return static_cast<std::size_t>(v);
}

std::uint64_t as_u64(const YAML::Node& n, const std::string& key) {
  const std::string s = scalar(n, key);
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    if (!s.empty() && s[0] == '-') throw std::invalid_argument("negative");
    v = std::stoull(s, &pos, 0);
  } catch (const std::exception&) {
    fail(key, "expected an unsigned integer, got '" + s + "'");
  }
  if (pos != s.size()) fail(key, "expected an unsigned integer, got '" + s + "'");
  return v;
}

double as_real(const YAML::Node& n, const std::string& key) {
  const std::string s = scalar(n, key);
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    fail(key, "expected a number, got '" + s + "'");
  }
  if (pos != s.size() || !std::isfinite(v)) fail(key, "expected a finite number, got '" + s + "'");
  return v;
}

bool as_bool(const YAML::Node& n, const std::string& key) {
  const std::string s = scalar(n, key);
  if (s == "true" || s == "True" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "False" || s == "no" || s == "off") return false;
  fail(key, "expected true/false, got '" + s + "'");
}

template <class F>
auto as_enum(const YAML::Node& n, const std::string& key, F parse) {
  const std::string s = scalar(n, key);
  try {
    return parse(s);
  } catch (const Error& e) {
    fail(key, e.what());
  }
}

using Setter = std::function<void(RunConfig&, const YAML::Node&, const std::string&)>;

const std::map<std::string, std::map<std::string, Setter>>& schema() {
  static const std::map<std::string, std::map<std::string, Setter>> s = {
      {"model",
       {
           {"kernel", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.model.kernel = as_enum(n, k, parse_kernel_kind); }},
           {"depth", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.model.depth = as_count(n, k); }},
           {"features", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.model.features = as_count(n, k); }},
           {"kernel_size", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.model.kernel_size = as_count(n, k); }},
           {"num_branches", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.model.num_branches = as_count(n, k); }},
           {"bidirectional", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.model.bidirectional = as_bool(n, k); }},
           {"norm", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.model.norm = as_enum(n, k, parse_norm_kind); }},
           {"prenorm", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.model.prenorm = as_bool(n, k); }},
           {"dropout", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.model.dropout = as_real(n, k); }},
           {"merge_style", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.model.merge_style = as_enum(n, k, parse_merge_style); }},
           {"fixed_decay", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.model.fixed_decay = as_real(n, k); }},
           {"pool", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.model.pool = as_enum(n, k, parse_pool_kind); }},
           {"engine", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.model.engine = as_enum(n, k, parse_conv_strategy); }},
       }},
      {"optim",
       {
           {"lr", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.optim.lr = as_real(n, k); }},
           {"kernel_lr", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.optim.kernel_lr = as_real(n, k); }},
           {"weight_decay", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.optim.weight_decay = as_real(n, k); }},
           {"batch_size", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.optim.batch_size = as_count(n, k); }},
           {"epochs", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.optim.epochs = as_count(n, k); }},
           {"warmup", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.optim.warmup = as_count(n, k); }},
           {"eval_every", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.optim.eval_every = as_count(n, k); }},
       }},
      {"task",
       {
           {"kind", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.task.kind = as_enum(n, k, parse_task_kind); }},
           {"length", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.task.length = as_count(n, k); }},
           {"classes", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.task.classes = as_count(n, k); }},
           {"n_symbols", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.task.n_symbols = as_count(n, k); }},
           {"band_limit", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.task.band_limit = as_count(n, k); }},
           {"train_size", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.task.train_size = as_count(n, k); }},
           {"val_size", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.task.val_size = as_count(n, k); }},
           {"test_size", [](RunConfig& c, const YAML::Node& n, const std::string& k) { c.task.test_size = as_count(n, k); }},
       }},
  };
  return s;
}

void apply_override(YAML::Node& root, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) fail(spec, "override must look like section.key=value");
  const std::string path = spec.substr(0, eq);
  YAML::Node value;
  try {
    value = YAML::Load(spec.substr(eq + 1));
  } catch (const YAML::Exception& e) {
    fail(path, std::string("bad override value: ") + e.what());
  }
  if (!value.IsScalar()) fail(path, "override value must be a scalar");
  const auto dot = path.find('.');
  if (dot == std::string::npos) {
    root[path] = value;
  } else {
    const std::string section = path.substr(0, dot), key = path.substr(dot + 1);
    if (root[section] && !root[section].IsMap()) fail(section, "expected a mapping");
    root[section][key] = value;
  }
}

}  // namespace

void validate(const RunConfig& c) {
  const auto& m = c.model;
  if (m.depth == 0) fail("model.depth", "must be at least 1");
  if (m.features == 0) fail("model.features", "must be at least 1");
  if (m.kernel_size == 0) fail("model.kernel_size", "must be at least 1");
  if (m.dropout < 0.0 || m.dropout >= 1.0) fail("model.dropout", "must be in [0, 1)");
  if (m.fixed_decay <= 0.0) fail("model.fixed_decay", "must be positive");
  const auto& o = c.optim;
  if (o.lr <= 0.0) fail("optim.lr", "must be positive");
  if (o.kernel_lr <= 0.0) fail("optim.kernel_lr", "must be positive");
  if (o.weight_decay < 0.0) fail("optim.weight_decay", "must be non-negative");
  if (o.batch_size == 0) fail("optim.batch_size", "must be at least 1");
  if (o.epochs == 0) fail("optim.epochs", "must be at least 1");
  const auto& t = c.task;
  if (t.length < 4) fail("task.length", "must be at least 4");
  if (t.classes < 2) fail("task.classes", "must be at least 2");
  if (t.train_size == 0) fail("task.train_size", "must be at least 1");
  if (t.test_size == 0) fail("task.test_size", "must be at least 1");
  if (m.kernel_size > t.length) fail("model.kernel_size", "exceeds task.length");
  if (t.kind == TaskKind::copy_memory && t.length <= t.n_symbols + 2)
    fail("task.n_symbols", "copy_memory needs length > n_symbols + 2");
  if (t.kind == TaskKind::sine_class && (t.band_limit == 0 || 2 * t.band_limit >= t.length))
    fail("task.band_limit", "must be in [1, length / 2)");
  if (t.kind == TaskKind::sine_class && t.band_limit < t.classes)
    fail("task.band_limit", "sine_class needs at least one frequency per class");
  if (t.kind == TaskKind::seq_image) {
    const auto side = static_cast<std::size_t>(std::lround(std::sqrt(double(t.length))));
    if (side * side != t.length) fail("task.length", "seq_image needs a square length");
  }
  if (t.seed != c.seed) fail("task", "task seed must equal the run seed");
}

RunConfig parse_config(std::string_view yaml, const std::vector<std::string>& overrides) {
  YAML::Node root;
  try {
    root = YAML::Load(std::string(yaml));
  } catch (const YAML::Exception& e) {
    throw Error(Errc::config_error, std::string("malformed YAML: ") + e.what());
  }
  if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  if (!root.IsMap()) throw Error(Errc::config_error, "config must be a mapping");
  for (const auto& o : overrides) apply_override(root, o);

  RunConfig c;
  const auto& s = schema();
  for (const auto& top : root) {
    const std::string name = top.first.as<std::string>();
    if (name == "seed") {
      c.seed = as_u64(top.second, "seed");
      continue;
    }
    auto sec = s.find(name);
    if (sec == s.end()) fail(name, "unknown section (model|optim|task|seed)");
    if (top.second.IsNull()) continue;
    if (!top.second.IsMap()) fail(name, "expected a mapping");
    for (const auto& kv : top.second) {
      const std::string key = kv.first.as<std::string>();
      auto it = sec->second.find(key);
      if (it == sec->second.end()) fail(name + "." + key, "unknown key");
      it->second(c, kv.second, name + "." + key);
    }
  }
  c.task.seed = c.seed;
  validate(c);
  return c;
}

RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::config_error, "cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), overrides);
}

std::string to_yaml(const RunConfig& c) {
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  out << YAML::BeginMap;
  out << YAML::Key << "seed" << YAML::Value << c.seed;
  out << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "kernel" << YAML::Value << std::string(to_string(c.model.kernel));
  out << YAML::Key << "depth" << YAML::Value << c.model.depth;
  out << YAML::Key << "features" << YAML::Value << c.model.features;
  out << YAML::Key << "kernel_size" << YAML::Value << c.model.kernel_size;
  out << YAML::Key << "num_branches" << YAML::Value << c.model.num_branches;
  out << YAML::Key << "bidirectional" << YAML::Value << c.model.bidirectional;
  out << YAML::Key << "norm" << YAML::Value << std::string(to_string(c.model.norm));
  out << YAML::Key << "prenorm" << YAML::Value << c.model.prenorm;
  out << YAML::Key << "dropout" << YAML::Value << c.model.dropout;
  out << YAML::Key << "merge_style" << YAML::Value << std::string(to_string(c.model.merge_style));
  out << YAML::Key << "fixed_decay" << YAML::Value << c.model.fixed_decay;
  out << YAML::Key << "pool" << YAML::Value << std::string(to_string(c.model.pool));
  out << YAML::Key << "engine" << YAML::Value << std::string(to_string(c.model.engine));
  out << YAML::EndMap;
  out << YAML::Key << "optim" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "lr" << YAML::Value << c.optim.lr;
  out << YAML::Key << "kernel_lr" << YAML::Value << c.optim.kernel_lr;
  out << YAML::Key << "weight_decay" << YAML::Value << c.optim.weight_decay;
  out << YAML::Key << "batch_size" << YAML::Value << c.optim.batch_size;
  out << YAML::Key << "epochs" << YAML::Value << c.optim.epochs;
  out << YAML::Key << "warmup" << YAML::Value << c.optim.warmup;
  out << YAML::Key << "eval_every" << YAML::Value << c.optim.eval_every;
  out << YAML::EndMap;
  out << YAML::Key << "task" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "kind" << YAML::Value << std::string(to_string(c.task.kind));
  out << YAML::Key << "length" << YAML::Value << c.task.length;
  out << YAML::Key << "classes" << YAML::Value << c.task.classes;
  out << YAML::Key << "n_symbols" << YAML::Value << c.task.n_symbols;
  out << YAML::Key << "band_limit" << YAML::Value << c.task.band_limit;
  out << YAML::Key << "train_size" << YAML::Value << c.task.train_size;
  out << YAML::Key << "val_size" << YAML::Value << c.task.val_size;
  out << YAML::Key << "test_size" << YAML::Value << c.task.test_size;
  out << YAML::EndMap;
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

ModelOptions model_options(const RunConfig& c, std::size_t in_dim, std::size_t seq_len, std::size_t classes,
                           std::size_t labels_per_example) {
  ModelOptions o;
  o.in_dim = in_dim;
  o.width = c.model.features;
  o.classes = classes;
  o.depth = c.model.depth;
  o.seq_len = seq_len;
  o.pool = c.model.pool;
  o.pool_last = labels_per_example;
  o.conv.base_len = c.model.kernel_size;
  o.conv.num_branches = c.model.num_branches;
  o.conv.kind = c.model.kernel;
  o.conv.merge_style = c.model.merge_style;
  o.conv.fixed_decay = c.model.fixed_decay;
  o.conv.bidirectional = c.model.bidirectional;
  o.conv.engine.strategy = c.model.engine;
  o.block.norm = c.model.norm;
  o.block.prenorm = c.model.prenorm;
  o.block.dropout = c.model.dropout;
  o.seed = derive_seed(c.seed, "init");
  return o;
}

AdamWOptions adamw_options(const RunConfig& c) {
  AdamWOptions o;
  o.lr = c.optim.lr;
  o.kernel_lr = c.optim.kernel_lr;
  o.weight_decay = c.optim.weight_decay;
  return o;
}

bool operator==(const ModelConfig& a, const ModelConfig& b) {
  return a.kernel == b.kernel && a.depth == b.depth && a.features == b.features && a.kernel_size == b.kernel_size &&
         a.num_branches == b.num_branches && a.bidirectional == b.bidirectional && a.norm == b.norm &&
         a.prenorm == b.prenorm && a.dropout == b.dropout && a.merge_style == b.merge_style &&
         a.fixed_decay == b.fixed_decay && a.pool == b.pool && a.engine == b.engine;
}

bool operator==(const OptimConfig& a, const OptimConfig& b) {
  return a.lr == b.lr && a.kernel_lr == b.kernel_lr && a.weight_decay == b.weight_decay &&
         a.batch_size == b.batch_size && a.epochs == b.epochs && a.warmup == b.warmup && a.eval_every == b.eval_every;
}

bool operator==(const RunConfig& a, const RunConfig& b) {
  const auto& s = a.task;
  const auto& t = b.task;
  return a.model == b.model && a.optim == b.optim && a.seed == b.seed && s.kind == t.kind && s.length == t.length &&
         s.classes == t.classes && s.n_symbols == t.n_symbols && s.band_limit == t.band_limit &&
         s.train_size == t.train_size && s.val_size == t.val_size && s.test_size == t.test_size && s.seed == t.seed;
}

}  // namespace mrconv
