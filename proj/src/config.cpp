// SPDX-License-Identifier: Apache-2.0
#include "dimple/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

#include "dimple/errors.hpp"
#include "dimple/serialize.hpp"

namespace dimple {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, const char* expected) {
  throw ConfigError(std::string(key) + ": cannot parse '" + std::string(value) + "' as " + expected);
}

std::uint64_t parse_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

double parse_f64(std::string_view key, std::string_view v) {
  const std::string s(v);
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(s, &used);
  } catch (const std::exception&) {
    bad_value(key, v, "a number");
  }
  if (used != s.size()) bad_value(key, v, "a number");
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "a boolean");
}

template <typename Parse>
auto parse_enum(std::string_view key, std::string_view v, Parse parse) {
  try {
    return parse(v);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(key) + ": " + e.what());
  }
}

struct Key {
  const char* name;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define SIZE_KEY(NAME, FIELD)                                                                     \
  Key {                                                                                           \
    NAME, [](ExperimentConfig& c, std::string_view v) { c.FIELD = parse_u64(NAME, v); },          \
        [](const ExperimentConfig& c) { return std::to_string(c.FIELD); }                         \
  }
#define REAL_KEY(NAME, FIELD)                                                                     \
  Key {                                                                                           \
    NAME, [](ExperimentConfig& c, std::string_view v) { c.FIELD = parse_f64(NAME, v); },          \
        [](const ExperimentConfig& c) { return format_double(c.FIELD); }                          \
  }
#define BOOL_KEY(NAME, FIELD)                                                                     \
  Key {                                                                                           \
    NAME, [](ExperimentConfig& c, std::string_view v) { c.FIELD = parse_bool(NAME, v); },         \
        [](const ExperimentConfig& c) { return std::string(c.FIELD ? "true" : "false"); }         \
  }
#define ENUM_KEY(NAME, FIELD, PARSE)                                                              \
  Key {                                                                                           \
    NAME, [](ExperimentConfig& c, std::string_view v) { c.FIELD = parse_enum(NAME, v, PARSE); },  \
        [](const ExperimentConfig& c) { return to_string(c.FIELD); }                              \
  }

std::string to_string(KernelKind k) { return k == KernelKind::rbf ? "rbf" : "linear"; }
KernelKind parse_kernel(std::string_view v) {
  if (v == "rbf") return KernelKind::rbf;
  if (v == "linear") return KernelKind::linear;
  throw ConfigError("unknown kernel '" + std::string(v) + "' (expected rbf or linear)");
}
std::string to_string(BandwidthRule r) { return r == BandwidthRule::median ? "median" : "fixed"; }
BandwidthRule parse_bandwidth(std::string_view v) {
  if (v == "median") return BandwidthRule::median;
  if (v == "fixed") return BandwidthRule::fixed;
  throw ConfigError("unknown bandwidth rule '" + std::string(v) + "' (expected median or fixed)");
}

const std::vector<Key>& key_table() {
  static const std::vector<Key> keys = {
      SIZE_KEY("task.num_classes", task.num_classes),
      SIZE_KEY("task.samples_per_class", task.samples_per_class),
      SIZE_KEY("task.test_samples_per_class", task.test_samples_per_class),
      SIZE_KEY("task.attr_cardinality", task.attr_cardinality),
      REAL_KEY("task.train_correlation", task.train_correlation),
      REAL_KEY("task.test_correlation", task.test_correlation),
      REAL_KEY("task.noise_std", task.noise_std),
      REAL_KEY("task.core_norm", task.core_norm),
      REAL_KEY("task.spurious_norm", task.spurious_norm),
      SIZE_KEY("task.num_patch_tokens", task.num_patch_tokens),
      SIZE_KEY("task.width", task.width),
      ENUM_KEY("task.shift_kind", task.shift_kind, parse_shift_kind),
      REAL_KEY("task.shift_magnitude", task.shift_magnitude),
      SIZE_KEY("encoder.num_layers", train.encoder.num_layers),
      SIZE_KEY("encoder.prompt_depth", train.encoder.prompt_depth),
      SIZE_KEY("encoder.prompt_len", train.encoder.prompt_len),
      SIZE_KEY("encoder.embed_width", train.encoder.embed_width),
      SIZE_KEY("encoder.num_heads", train.encoder.num_heads),
      SIZE_KEY("encoder.mlp_ratio", train.encoder.mlp_ratio),
      BOOL_KEY("encoder.positional", train.encoder.positional),
      REAL_KEY("encoder.init_std", train.encoder.init_std),
      ENUM_KEY("encoder.head_init", train.head_init, parse_head_init),
      REAL_KEY("encoder.class_token_scale", train.class_token_scale),
      REAL_KEY("loss.alpha", train.loss.alpha),
      REAL_KEY("loss.beta", train.loss.beta),
      REAL_KEY("loss.tau", train.loss.tau),
      BOOL_KEY("loss.use_cmi", train.use_cmi),
      ENUM_KEY("loss.kernel", train.kernel.kind, parse_kernel),
      ENUM_KEY("loss.bandwidth", train.kernel.rule, parse_bandwidth),
      REAL_KEY("loss.sigma", train.kernel.sigma),
      REAL_KEY("loss.fallback_sigma", train.kernel.fallback_sigma),
      SIZE_KEY("train.epochs", train.epochs),
      SIZE_KEY("train.batch_size", train.batch_size),
      REAL_KEY("train.lr", train.lr),
      REAL_KEY("train.momentum", train.momentum),
      SIZE_KEY("train.seed", train.seed),
      ENUM_KEY("train.objective", train.objective, parse_objective),
      ENUM_KEY("train.prompt_mode", train.mode, parse_prompt_mode),
      BOOL_KEY("train.train_encoders", train.train_encoders),
      BOOL_KEY("train.paper_regime", paper_regime),
  };
  return keys;
}

const Key& find_key(std::string_view key) {
  const auto& keys = key_table();
  for (const auto& k : keys)
    if (key == k.name) return k;
  const Key* best = &keys.front();
  std::size_t best_dist = std::numeric_limits<std::size_t>::max();
  for (const auto& k : keys) {
    const std::size_t d = edit_distance(key, k.name);
    if (d < best_dist) {
      best_dist = d;
      best = &k;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'; did you mean '" + best->name + "'?");
}

}  // namespace

std::size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

void ExperimentConfig::resolve() {
  if (paper_regime) apply_paper_regime(train, task);
  task.seed = hash64(train.seed, "data");
  train.encoder.text_width = task.width;
  train.encoder.vision_width = task.width;
  train.encoder.num_patch_tokens = task.num_patch_tokens;
  train.encoder.temperature = train.loss.tau;
  task.validate();
  train.validate();
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : key_table()) out.emplace_back(k.name);
  return out;
}

void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
  find_key(key).set(cfg, trim(value));
}

std::string get_config_value(const ExperimentConfig& cfg, std::string_view key) { return find_key(key).get(cfg); }

void apply_override(ExperimentConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("override '" + std::string(assignment) + "' is not of the form section.key=value");
  }
  set_config_value(cfg, trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

ExperimentConfig parse_config(std::string_view text, const std::string& source) {
  ExperimentConfig cfg;
  std::string section;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  for (std::string raw; std::getline(in, raw);) {
    ++line_no;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (section != "task" && section != "encoder" && section != "loss" && section != "train") {
        throw ConfigError(where + "unknown section '" + section + "' (expected task, encoder, loss or train)");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + "expected key = value");
    if (section.empty()) throw ConfigError(where + "key outside of a section");
    const std::string key = section + "." + std::string(trim(line.substr(0, eq)));
    try {
      set_config_value(cfg, key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

std::string format_config(const ExperimentConfig& cfg) {
  std::string out, section;
  for (const auto& k : key_table()) {
    const std::string_view name = k.name;
    const auto dot = name.find('.');
    const std::string sec(name.substr(0, dot));
    if (sec != section) {
      if (!section.empty()) out += '\n';
      out += "[" + sec + "]\n";
      section = sec;
    }
    out += std::string(name.substr(dot + 1)) + " = " + k.get(cfg) + "\n";
  }
  return out;
}

}  // namespace dimple
