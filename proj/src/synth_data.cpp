// SPDX-License-Identifier: Apache-2.0
#include "dimple/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "dimple/errors.hpp"
#include "dimple/rng.hpp"
#include "dimple/serialize.hpp"

namespace dimple {

namespace {

constexpr const char* kMagic = "DIMPLESYN v1";

double unit_from_hash(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

// Attribute counts for one class of an evaluation split: proportional to the
// sampling probabilities, with every attribute present at least once.
std::vector<std::size_t> attr_quota(const TaskSpec& spec, int c, std::size_t n) {
  const std::size_t A = spec.attr_cardinality;
  const int aligned = spec.aligned_attr(c);
  std::vector<double> want(A);
  for (std::size_t a = 0; a < A; ++a) {
    want[a] = static_cast<int>(a) == aligned ? spec.test_correlation * n
                                             : (1.0 - spec.test_correlation) / static_cast<double>(A - 1) * n;
  }
  std::vector<std::size_t> count(A);
  std::size_t used = 0;
  for (std::size_t a = 0; a < A; ++a) used += count[a] = static_cast<std::size_t>(std::floor(want[a]));
  std::vector<std::size_t> order(A);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return want[x] - std::floor(want[x]) > want[y] - std::floor(want[y]);
  });
  for (std::size_t k = 0; used < n; ++k, ++used) ++count[order[k % A]];
  for (std::size_t a = 0; a < A; ++a) {
    if (count[a] > 0) continue;
    auto largest = std::max_element(count.begin(), count.end());
    --*largest;
    count[a] = 1;
  }
  return count;
}

LabeledBatch sample_split(const TaskSpec& spec, std::shared_ptr<const TaskGeometry> geometry, Environment env,
                          std::span<const int> classes, std::size_t per_class, std::int64_t first_id) {
  Rng rng(hash64(spec.seed, to_string(env)));
  const std::size_t T = spec.num_patch_tokens, d = spec.width, A = spec.attr_cardinality;
  LabeledBatch b;
  b.env = env;
  b.spec = spec;
  b.geometry = std::move(geometry);
  for (int c : classes) {
    std::vector<int> attrs;
    if (env == Environment::train) {
      // Aligned with probability rho, otherwise uniform over the other attributes.
      for (std::size_t i = 0; i < per_class; ++i) {
        int a = spec.aligned_attr(c);
        if (A > 1 && rng.uniform() >= spec.train_correlation) {
          a = (a + 1 + static_cast<int>(rng.below(A - 1))) % static_cast<int>(A);
        }
        attrs.push_back(a);
      }
    } else {
      auto quota = attr_quota(spec, c, per_class);
      for (std::size_t a = 0; a < A; ++a) attrs.insert(attrs.end(), quota[a], static_cast<int>(a));
      rng.shuffle(attrs);
    }
    for (int a : attrs) {
      b.labels.push_back(c);
      b.attrs.push_back(a);
      b.painted_attrs.push_back(a);
      b.groups.push_back(c * static_cast<int>(A) + a);
    }
  }
  const std::size_t n = b.labels.size();
  b.sample_ids.resize(n);
  std::iota(b.sample_ids.begin(), b.sample_ids.end(), first_id);
  b.core_scale.assign(n, 1.0);
  b.noise.resize(n * T * d);
  for (auto& v : b.noise) v = spec.noise_std * rng.normal();
  b.render();
  return b;
}

void check_geometry(const LabeledBatch& b) {
  if (!b.geometry) throw ContractError("batch has no task geometry attached");
}

}  // namespace

std::string to_string(ShiftKind kind) {
  switch (kind) {
    case ShiftKind::noise_up: return "noise_up";
    case ShiftKind::core_scale_down: return "core_scale_down";
    case ShiftKind::attr_flip: return "attr_flip";
  }
  return "unknown";
}

ShiftKind parse_shift_kind(std::string_view name) {
  if (name == "noise_up") return ShiftKind::noise_up;
  if (name == "core_scale_down") return ShiftKind::core_scale_down;
  if (name == "attr_flip") return ShiftKind::attr_flip;
  throw ConfigError("unknown shift kind '" + std::string(name) +
                    "' (expected noise_up, core_scale_down or attr_flip)");
}

std::string to_string(Environment env) {
  switch (env) {
    case Environment::train: return "train";
    case Environment::test_id: return "test_id";
    case Environment::test_shift: return "test_shift";
  }
  return "unknown";
}

Environment parse_environment(std::string_view name) {
  if (name == "train") return Environment::train;
  if (name == "test_id") return Environment::test_id;
  if (name == "test_shift") return Environment::test_shift;
  throw FormatError("unknown environment '" + std::string(name) + "'");
}

void TaskSpec::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("task: " + msg); };
  if (num_classes < 2) throw DegenerateTaskError("task: num_classes must be at least 2");
  if (attr_cardinality < 1) fail("attr_cardinality must be at least 1");
  if (samples_per_class < attr_cardinality) {
    fail("samples_per_class " + std::to_string(samples_per_class) + " cannot cover " +
         std::to_string(attr_cardinality) + " attribute groups");
  }
  if (test_samples_per_class < attr_cardinality) {
    fail("test_samples_per_class " + std::to_string(test_samples_per_class) + " cannot cover " +
         std::to_string(attr_cardinality) + " attribute groups");
  }
  if (!(train_correlation >= 0.0 && train_correlation <= 1.0)) fail("train_correlation must lie in [0, 1]");
  if (!(test_correlation >= 0.0 && test_correlation <= 1.0)) fail("test_correlation must lie in [0, 1]");
  if (!(noise_std >= 0.0)) fail("noise_std must be non-negative");
  if (!(core_norm > 0.0)) fail("core_norm must be positive");
  if (!(spurious_norm >= 0.0)) fail("spurious_norm must be non-negative");
  if (num_patch_tokens < 2) fail("num_patch_tokens must be at least 2");
  if (num_classes + attr_cardinality > width) fail("width must hold orthogonal class and attribute directions");
  if (!(shift_magnitude >= 0.0)) fail("shift_magnitude must be non-negative");
}

std::vector<int> base_classes(const TaskSpec& spec) {
  if (spec.num_classes < 2) throw DegenerateTaskError("base/novel split needs at least 2 classes");
  std::vector<int> out((spec.num_classes + 1) / 2);
  std::iota(out.begin(), out.end(), 0);
  return out;
}

std::vector<int> novel_classes(const TaskSpec& spec) {
  const std::size_t nb = base_classes(spec).size();
  std::vector<int> out(spec.num_classes - nb);
  std::iota(out.begin(), out.end(), static_cast<int>(nb));
  return out;
}

std::shared_ptr<const TaskGeometry> make_geometry(const TaskSpec& spec) {
  spec.validate();
  Rng rng(hash64(spec.seed, "geometry"));
  const std::size_t d = spec.width, k = spec.num_classes + spec.attr_cardinality;
  // Gram-Schmidt on Gaussian draws.
  std::vector<double> dirs(k * d);
  for (std::size_t i = 0; i < k; ++i) {
    double* v = dirs.data() + i * d;
    for (;;) {
      for (std::size_t j = 0; j < d; ++j) v[j] = rng.normal();
      for (std::size_t p = 0; p < i; ++p) {
        const double* u = dirs.data() + p * d;
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += v[j] * u[j];
        for (std::size_t j = 0; j < d; ++j) v[j] -= dot * u[j];
      }
      double norm = 0.0;
      for (std::size_t j = 0; j < d; ++j) norm += v[j] * v[j];
      norm = std::sqrt(norm);
      if (norm < 1e-6) continue;
      for (std::size_t j = 0; j < d; ++j) v[j] /= norm;
      break;
    }
  }
  auto g = std::make_shared<TaskGeometry>();
  const std::size_t C = spec.num_classes;
  g->class_directions = Tensor({C, d}, std::vector<double>(dirs.begin(), dirs.begin() + static_cast<long>(C * d)));
  g->attr_directions = Tensor({spec.attr_cardinality, d},
                              std::vector<double>(dirs.begin() + static_cast<long>(C * d), dirs.end()));
  return g;
}

SyntheticTask generate(const TaskSpec& spec) {
  spec.validate();
  SyntheticTask task;
  task.spec = spec;
  task.geometry = make_geometry(spec);
  std::vector<int> all(spec.num_classes);
  std::iota(all.begin(), all.end(), 0);
  const auto base = base_classes(spec);
  task.train = sample_split(spec, task.geometry, Environment::train, base, spec.samples_per_class, 0);
  const auto next = static_cast<std::int64_t>(task.train.size());
  task.test_id = sample_split(spec, task.geometry, Environment::test_id, all, spec.test_samples_per_class, next);
  const auto after = next + static_cast<std::int64_t>(task.test_id.size());
  LabeledBatch shifted =
      sample_split(spec, task.geometry, Environment::test_shift, all, spec.test_samples_per_class, after);
  task.test_shift = domain_shift(shifted, spec.shift_kind, spec.shift_magnitude, spec.seed);
  return task;
}

void LabeledBatch::render() {
  check_geometry(*this);
  const std::size_t n = size(), T = spec.num_patch_tokens, d = spec.width, half = T / 2;
  if (n == 0) {
    images = Tensor();
    return;
  }
  auto cls = geometry->class_directions.data();
  auto att = geometry->attr_directions.data();
  std::vector<double> px(n * T * d);
  for (std::size_t s = 0; s < n; ++s) {
    const double core = core_scale[s] * spec.core_norm;
    const double* u = cls.data() + static_cast<std::size_t>(labels[s]) * d;
    const double* a = att.data() + static_cast<std::size_t>(painted_attrs[s]) * d;
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t off = (s * T + t) * d;
      if (t < half) {
        for (std::size_t j = 0; j < d; ++j) px[off + j] = core * u[j] + noise[off + j];
      } else {
        for (std::size_t j = 0; j < d; ++j) px[off + j] = spec.spurious_norm * a[j] + noise[off + j];
      }
    }
  }
  images = Tensor({n, T, d}, std::move(px));
}

LabeledBatch LabeledBatch::subset(std::span<const std::size_t> indices) const {
  const std::size_t stride = spec.num_patch_tokens * spec.width;
  LabeledBatch out;
  out.env = env;
  out.spec = spec;
  out.geometry = geometry;
  for (std::size_t i : indices) {
    if (i >= size()) throw DimensionError("subset index " + std::to_string(i) + " out of range");
    out.labels.push_back(labels[i]);
    out.attrs.push_back(attrs[i]);
    out.groups.push_back(groups[i]);
    out.painted_attrs.push_back(painted_attrs[i]);
    out.sample_ids.push_back(sample_ids[i]);
    out.core_scale.push_back(core_scale[i]);
    out.noise.insert(out.noise.end(), noise.begin() + static_cast<long>(i * stride),
                     noise.begin() + static_cast<long>((i + 1) * stride));
  }
  // Copy image rows directly; re-rendering gives the same values.
  if (out.size() == 0) return out;
  auto src = images.data();
  std::vector<double> px;
  px.reserve(out.size() * stride);
  for (std::size_t i : indices)
    px.insert(px.end(), src.begin() + static_cast<long>(i * stride), src.begin() + static_cast<long>((i + 1) * stride));
  out.images = Tensor({out.size(), spec.num_patch_tokens, spec.width}, std::move(px));
  return out;
}

LabeledBatch LabeledBatch::restrict_to(std::span<const int> classes) const {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < size(); ++i)
    if (std::find(classes.begin(), classes.end(), labels[i]) != classes.end()) keep.push_back(i);
  return subset(keep);
}

LabeledBatch domain_shift(const LabeledBatch& batch, ShiftKind kind, double magnitude, std::uint64_t seed) {
  if (!(magnitude >= 0.0)) throw ConfigError("domain_shift: magnitude must be non-negative");
  LabeledBatch out = batch;
  if (magnitude == 0.0) return out;
  check_geometry(batch);
  const std::size_t stride = batch.spec.num_patch_tokens * batch.spec.width;
  switch (kind) {
    case ShiftKind::noise_up: {
      const std::uint64_t stream = hash64(seed, "noise_up");
      for (std::size_t s = 0; s < out.size(); ++s) {
        Rng rng(hash64(stream, static_cast<std::uint64_t>(out.sample_ids[s])));
        for (std::size_t k = 0; k < stride; ++k) out.noise[s * stride + k] += magnitude * rng.normal();
      }
      break;
    }
    case ShiftKind::core_scale_down:
      if (magnitude > 1.0) throw ConfigError("domain_shift: core_scale_down magnitude must lie in [0, 1]");
      for (auto& c : out.core_scale) c *= 1.0 - magnitude;
      break;
    case ShiftKind::attr_flip: {
      const std::uint64_t stream = hash64(seed, "attr_flip");
      const int A = static_cast<int>(batch.spec.attr_cardinality);
      for (std::size_t s = 0; s < out.size(); ++s) {
        const double u = unit_from_hash(hash64(stream, static_cast<std::uint64_t>(out.sample_ids[s])));
        if (u < magnitude) out.painted_attrs[s] = (out.painted_attrs[s] + 1) % A;
      }
      break;
    }
  }
  out.render();
  return out;
}

std::vector<int> core_oracle_predict(const LabeledBatch& batch) {
  check_geometry(batch);
  const std::size_t T = batch.spec.num_patch_tokens, d = batch.spec.width, half = T / 2;
  const std::size_t C = batch.spec.num_classes;
  auto px = batch.images.data();
  auto dirs = batch.geometry->class_directions.data();
  std::vector<int> pred(batch.size());
  std::vector<double> mean(d);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    std::fill(mean.begin(), mean.end(), 0.0);
    for (std::size_t t = 0; t < half; ++t)
      for (std::size_t j = 0; j < d; ++j) mean[j] += px[(s * T + t) * d + j];
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += mean[j] * dirs[c * d + j];
      if (dot > best) {
        best = dot;
        pred[s] = static_cast<int>(c);
      }
    }
  }
  return pred;
}

namespace {

struct BlockWriter {
  std::vector<std::pair<std::string, std::string>> blobs;  // name, bytes
  std::size_t offset = 0;
  nlohmann::json index = nlohmann::json::array();

  template <typename T>
  void add(const std::string& name, const std::vector<T>& values, const char* dtype) {
    std::string bytes(values.size() * sizeof(T), '\0');
    if (!values.empty()) std::memcpy(bytes.data(), values.data(), bytes.size());
    index.push_back({{"name", name}, {"dtype", dtype}, {"count", values.size()}, {"offset", offset}});
    offset += bytes.size();
    blobs.emplace_back(name, std::move(bytes));
  }
};

std::vector<std::int32_t> to_i32(const std::vector<int>& v) { return {v.begin(), v.end()}; }
std::vector<int> from_i32(const std::vector<std::int32_t>& v) { return {v.begin(), v.end()}; }

}  // namespace

void save_dataset(const SyntheticTask& task, const std::string& path) {
  BlockWriter w;
  nlohmann::json splits = nlohmann::json::array();
  auto add_split = [&](const LabeledBatch& b) {
    const std::string p = to_string(b.env) + ".";
    std::vector<double> px(b.images.data().begin(), b.images.data().end());
    w.add(p + "images", px, "f64");
    w.add(p + "labels", to_i32(b.labels), "i32");
    w.add(p + "groups", to_i32(b.groups), "i32");
    w.add(p + "attrs", to_i32(b.attrs), "i32");
    w.add(p + "painted_attrs", to_i32(b.painted_attrs), "i32");
    w.add(p + "sample_ids", b.sample_ids, "i64");
    w.add(p + "noise", b.noise, "f64");
    w.add(p + "core_scale", b.core_scale, "f64");
    splits.push_back({{"name", to_string(b.env)}, {"size", b.size()}});
  };
  add_split(task.train);
  add_split(task.test_id);
  add_split(task.test_shift);
  auto vec = [](const Tensor& t) { return std::vector<double>(t.data().begin(), t.data().end()); };
  w.add("class_directions", vec(task.geometry->class_directions), "f64");
  w.add("attr_directions", vec(task.geometry->attr_directions), "f64");

  nlohmann::json manifest = {{"spec", to_json(task.spec)}, {"splits", splits}, {"blocks", w.index}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << kMagic << '\n' << manifest.dump() << '\n';
  for (auto& [name, bytes] : w.blobs) out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path + "' failed");
}

SyntheticTask load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset '" + path + "'");
  std::string header, manifest_line;
  if (!std::getline(in, header)) throw TruncatedFileError("dataset '" + path + "' is empty");
  if (header.rfind("DIMPLESYN ", 0) != 0) throw FormatError("'" + path + "' is not a dataset file");
  if (header != kMagic) throw VersionError("unsupported dataset version '" + header + "'");
  if (!std::getline(in, manifest_line)) throw TruncatedFileError("dataset '" + path + "' has no manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(manifest_line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("dataset manifest: " + std::string(e.what()));
  }
  SyntheticTask task;
  task.spec = task_spec_from_json(manifest.at("spec"));
  task.spec.validate();
  const std::size_t stride = task.spec.num_patch_tokens * task.spec.width;

  std::size_t expected_offset = 0;
  auto next_block = [&](std::size_t i, const std::string& name, std::size_t count) {
    const auto& blk = manifest.at("blocks").at(i);
    if (blk.at("name") != name || blk.at("count").get<std::size_t>() != count ||
        blk.at("offset").get<std::size_t>() != expected_offset) {
      throw ShapeMismatchError("dataset block " + std::to_string(i) + " does not match '" + name + "' with " +
                               std::to_string(count) + " values");
    }
  };
  auto geometry = std::make_shared<TaskGeometry>();
  std::vector<LabeledBatch> batches;
  std::size_t bi = 0;
  for (const auto& split : manifest.at("splits")) {
    LabeledBatch b;
    b.env = parse_environment(split.at("name").get<std::string>());
    b.spec = task.spec;
    const std::size_t n = split.at("size").get<std::size_t>();
    const std::string p = to_string(b.env) + ".";
    auto f64 = [&](const std::string& name, std::size_t count) {
      next_block(bi++, p + name, count);
      expected_offset += count * 8;
      return read_pod_array<double>(in, count, p + name);
    };
    auto i32 = [&](const std::string& name) {
      next_block(bi++, p + name, n);
      expected_offset += n * 4;
      return from_i32(read_pod_array<std::int32_t>(in, n, p + name));
    };
    auto px = f64("images", n * stride);
    b.labels = i32("labels");
    b.groups = i32("groups");
    b.attrs = i32("attrs");
    b.painted_attrs = i32("painted_attrs");
    next_block(bi++, p + "sample_ids", n);
    expected_offset += n * 8;
    b.sample_ids = read_pod_array<std::int64_t>(in, n, p + "sample_ids");
    b.noise = f64("noise", n * stride);
    b.core_scale = f64("core_scale", n);
    if (n > 0) b.images = Tensor({n, task.spec.num_patch_tokens, task.spec.width}, std::move(px));
    batches.push_back(std::move(b));
  }
  const std::size_t C = task.spec.num_classes, A = task.spec.attr_cardinality, d = task.spec.width;
  next_block(bi++, "class_directions", C * d);
  expected_offset += C * d * 8;
  geometry->class_directions = Tensor({C, d}, read_pod_array<double>(in, C * d, "class_directions"));
  next_block(bi++, "attr_directions", A * d);
  geometry->attr_directions = Tensor({A, d}, read_pod_array<double>(in, A * d, "attr_directions"));
  task.geometry = geometry;
  for (auto& b : batches) {
    b.geometry = geometry;
    switch (b.env) {
      case Environment::train: task.train = std::move(b); break;
      case Environment::test_id: task.test_id = std::move(b); break;
      case Environment::test_shift: task.test_shift = std::move(b); break;
    }
  }
  return task;
}

}  // namespace dimple
