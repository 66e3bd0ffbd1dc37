// SPDX-License-Identifier: Apache-2.0
#include "dimple/model.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <thread>

#include "dimple/errors.hpp"
#include "dimple/ops.hpp"
#include "dimple/serialize.hpp"

namespace dimple {

namespace {

constexpr char kCheckpointMagic[] = "DIMPLECKPT";
constexpr std::size_t kMagicLen = sizeof(kCheckpointMagic) - 1;
constexpr std::uint32_t kCheckpointVersion = 1;

// Calls fn(name, tensor&) for every tensor of the model in a fixed order.
template <typename M, typename F>
void visit(M& m, F&& fn) {
  auto linear = [&](const std::string& name, auto& map) {
    fn(name + ".weight", map.weight);
    fn(name + ".bias", map.bias);
  };
  auto transformer = [&](const std::string& p, auto& net) {
    if (net.positional.defined()) fn(p + ".positional", net.positional);
    for (std::size_t i = 0; i < net.blocks.size(); ++i) {
      auto& b = net.blocks[i];
      const std::string q = p + ".block" + std::to_string(i + 1);
      fn(q + ".ln1_gain", b.ln1_gain);
      fn(q + ".ln1_shift", b.ln1_shift);
      fn(q + ".query", b.query);
      fn(q + ".key", b.key);
      fn(q + ".value", b.value);
      linear(q + ".out", b.out);
      fn(q + ".ln2_gain", b.ln2_gain);
      fn(q + ".ln2_shift", b.ln2_shift);
      linear(q + ".fc1", b.fc1);
      linear(q + ".fc2", b.fc2);
    }
    fn(p + ".final_gain", net.final_gain);
    fn(p + ".final_shift", net.final_shift);
    fn(p + ".projection", net.projection);
  };
  auto stack = [&](const std::string& p, auto& tensors) {
    for (std::size_t i = 0; i < tensors.size(); ++i) fn(p + "." + std::to_string(i + 1), tensors[i]);
  };

  fn(std::string("text.vocab"), m.text.vocab.embeddings);
  transformer("text", m.text.body);
  transformer("vision", m.vision.body);
  fn(std::string("vision.cls"), m.vision.cls);

  auto& bank = m.bank;
  stack("prompts.text", bank.text);
  for (std::size_t i = 0; i < bank.coupling.size(); ++i) linear("coupling." + std::to_string(i + 1), bank.coupling[i]);
  stack("prompts.vision", bank.vision);
  stack("prompts.text_invariant", bank.text_invariant);
  stack("prompts.text_spurious", bank.text_spurious);
  if (bank.mode == PromptMode::early) {
    linear("coupling.to_vision_invariant", bank.to_vision_invariant);
    linear("coupling.to_vision_spurious", bank.to_vision_spurious);
  }
  linear("heads.vision_invariant", m.heads.vision_invariant);
  linear("heads.vision_spurious", m.heads.vision_spurious);
  linear("heads.text_invariant", m.heads.text_invariant);
  linear("heads.text_spurious", m.heads.text_spurious);
}

bool is_encoder_tensor(const std::string& name) {
  return name.rfind("text.", 0) == 0 || name.rfind("vision.", 0) == 0;
}

std::optional<KernelSpec> usable_kernel(const std::optional<KernelSpec>& kernel, std::span<const int> labels) {
  if (!kernel) return std::nullopt;
  std::map<int, int> counts;
  for (int y : labels)
    if (++counts[y] >= 2) return kernel;
  return std::nullopt;
}

}  // namespace

std::string to_string(Objective objective) {
  switch (objective) {
    case Objective::dimple: return "dimple";
    case Objective::dimple_early: return "dimple_early";
    case Objective::coop: return "coop";
    case Objective::coop_ood: return "coop_ood";
  }
  return "unknown";
}

Objective parse_objective(std::string_view name) {
  if (name == "dimple") return Objective::dimple;
  if (name == "dimple_early") return Objective::dimple_early;
  if (name == "coop") return Objective::coop;
  if (name == "coop_ood") return Objective::coop_ood;
  throw ConfigError("unknown objective '" + std::string(name) + "' (expected dimple, dimple_early, coop or coop_ood)");
}

void check_compatible(Objective objective, PromptMode mode) {
  if ((objective == Objective::dimple_early) != (mode == PromptMode::early)) {
    throw ConfigError("objective " + to_string(objective) + " is incompatible with prompt mode " + to_string(mode) +
                      " (the early objective requires early prompts and vice versa)");
  }
}

std::vector<NamedTensor> Model::named_tensors() const {
  std::vector<NamedTensor> out;
  visit(*this, [&](const std::string& name, const Tensor& t) { out.emplace_back(name, t); });
  return out;
}

std::vector<NamedTensor> Model::named_parameters(bool with_encoders) const {
  std::vector<NamedTensor> out;
  visit(*this, [&](const std::string& name, const Tensor& t) {
    if (name == "text.vocab") return;
    if (!with_encoders && is_encoder_tensor(name)) return;
    out.emplace_back(name, t);
  });
  return out;
}

Model make_model(const EncoderConfig& cfg, Objective objective, PromptMode mode, const Tensor& class_embeddings,
                 Rng& rng, HeadInit head_init) {
  cfg.validate();
  check_compatible(objective, mode);
  Model m;
  m.config = cfg;
  m.objective = objective;
  m.text = make_text_encoder(cfg, class_embeddings, rng);
  m.vision = make_vision_encoder(cfg, rng);
  m.bank = make_prompt_bank(mode, cfg, m.text.vocab, rng);
  m.heads = make_heads(cfg.embed_width, cfg.init_std, rng, head_init);
  return m;
}

Model clone(const Model& model) {
  Model copy = model;
  visit(copy, [](const std::string&, Tensor& t) {
    Tensor fresh(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), t.requires_grad());
    t = fresh;
  });
  return copy;
}

std::vector<int> local_labels(std::span<const int> labels, std::span<const int> class_ids) {
  std::vector<int> out;
  out.reserve(labels.size());
  for (int y : labels) {
    auto it = std::find(class_ids.begin(), class_ids.end(), y);
    if (it == class_ids.end()) throw DimensionError("label " + std::to_string(y) + " is not among the task classes");
    out.push_back(static_cast<int>(it - class_ids.begin()));
  }
  return out;
}

LossReport model_loss(const Model& model, const Tensor& images, std::span<const int> labels,
                      std::span<const int> class_ids, const LossWeights& w, const std::optional<KernelSpec>& kernel) {
  const auto local = local_labels(labels, class_ids);
  const auto k = usable_kernel(kernel, local);
  const auto& cfg = model.config;
  switch (model.objective) {
    case Objective::dimple: {
      Tensor zv = encode_image(model.vision, images, model.bank, cfg);
      Tensor zt = encode_text(model.text, class_ids, model.bank, cfg);
      return dimple_total(decompose(zv, zt, model.heads, local), w, k);
    }
    case Objective::dimple_early: {
      auto [tu, ts] = encode_text_early(model.text, class_ids, model.bank, cfg);
      auto [vu, vs] = encode_image_early(model.vision, images, model.bank, cfg);
      return early_total(tu, ts, vu, vs, local, w, k);
    }
    case Objective::coop: {
      Tensor zv = encode_image(model.vision, images, model.bank, cfg);
      Tensor zt = encode_text(model.text, class_ids, model.bank, cfg);
      return coop_baseline(zv, zt, local, w);
    }
    case Objective::coop_ood: {
      Tensor zv = encode_image(model.vision, images, model.bank, cfg);
      Tensor zt = encode_text(model.text, class_ids, model.bank, cfg);
      return coop_ood_baseline(zv, zt, model.heads.vision_invariant, model.heads.vision_spurious, local, w, k);
    }
  }
  throw ConfigError("unknown objective");
}

namespace {

Tensor image_invariant(const Model& model, const Tensor& images) {
  const auto& cfg = model.config;
  switch (model.objective) {
    case Objective::dimple:
      return normalize_rows(model.heads.vision_invariant(encode_image(model.vision, images, model.bank, cfg)));
    case Objective::dimple_early: return encode_image_early(model.vision, images, model.bank, cfg).first;
    case Objective::coop: return encode_image(model.vision, images, model.bank, cfg);
    case Objective::coop_ood:
      return normalize_rows(model.heads.vision_invariant(encode_image(model.vision, images, model.bank, cfg)));
  }
  throw ConfigError("unknown objective");
}

Tensor text_invariant(const Model& model, std::span<const int> class_ids) {
  const auto& cfg = model.config;
  switch (model.objective) {
    case Objective::dimple:
      return normalize_rows(model.heads.text_invariant(encode_text(model.text, class_ids, model.bank, cfg)));
    case Objective::dimple_early: return encode_text_early(model.text, class_ids, model.bank, cfg).first;
    case Objective::coop:
    case Objective::coop_ood: return encode_text(model.text, class_ids, model.bank, cfg);
  }
  throw ConfigError("unknown objective");
}

}  // namespace

std::pair<Tensor, Tensor> invariant_features(const Model& model, const Tensor& images,
                                             std::span<const int> class_ids) {
  return {image_invariant(model, images), text_invariant(model, class_ids)};
}

FeatureBundle export_features(const Model& model, const Tensor& images, std::span<const int> labels,
                              std::span<const int> class_ids) {
  const auto& cfg = model.config;
  const auto local = local_labels(labels, class_ids);
  switch (model.objective) {
    case Objective::dimple: {
      Tensor zv = encode_image(model.vision, images, model.bank, cfg);
      Tensor zt = encode_text(model.text, class_ids, model.bank, cfg);
      return decompose(zv, zt, model.heads, local);
    }
    case Objective::dimple_early: {
      auto [tu, ts] = encode_text_early(model.text, class_ids, model.bank, cfg);
      auto [vu, vs] = encode_image_early(model.vision, images, model.bank, cfg);
      return {vu, vs, tu, ts, local};
    }
    case Objective::coop: {
      Tensor zv = encode_image(model.vision, images, model.bank, cfg);
      Tensor zt = encode_text(model.text, class_ids, model.bank, cfg);
      return {zv, zv, zt, zt, local};
    }
    case Objective::coop_ood: {
      Tensor zv = encode_image(model.vision, images, model.bank, cfg);
      Tensor zt = encode_text(model.text, class_ids, model.bank, cfg);
      return {normalize_rows(model.heads.vision_invariant(zv)), normalize_rows(model.heads.vision_spurious(zv)), zt, zt,
              local};
    }
  }
  throw ConfigError("unknown objective");
}

std::vector<int> predict(const Model& model, const Tensor& images, std::span<const int> class_ids,
                         std::size_t threads) {
  if (images.dim() != 3) throw DimensionError("predict: expected images [N × T × d]");
  const std::size_t n = images.shape()[0], T = images.shape()[1], d = images.shape()[2];
  constexpr std::size_t kChunk = 128;
  const std::size_t chunks = (n + kChunk - 1) / kChunk;
  Tensor text;
  {
    NoGradGuard guard;
    text = text_invariant(model, class_ids);
  }
  std::vector<int> out(n);
  auto work = [&](std::size_t first_chunk, std::size_t stride) {
    NoGradGuard guard;
    for (std::size_t c = first_chunk; c < chunks; c += stride) {
      const std::size_t lo = c * kChunk, hi = std::min(n, lo + kChunk);
      Tensor part({hi - lo, T, d},
                  std::vector<double>(images.data().begin() + static_cast<long>(lo * T * d),
                                      images.data().begin() + static_cast<long>(hi * T * d)));
      Tensor logits = matmul(image_invariant(model, part), transpose(text));
      const std::size_t C = class_ids.size();
      for (std::size_t i = 0; i < hi - lo; ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < C; ++k)
          if (logits.at(i, k) > logits.at(i, best)) best = k;
        out[lo + i] = class_ids[best];
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, chunks));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work, t, workers);
    for (auto& th : pool) th.join();
  }
  return out;
}

void save_checkpoint(const Model& model, const std::string& path) {
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  const auto named = model.named_tensors();
  for (const auto& [name, t] : named) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel() * sizeof(double);
  }
  nlohmann::json manifest = {{"encoder", to_json(model.config)},
                             {"objective", to_string(model.objective)},
                             {"prompt_mode", to_string(model.bank.mode)},
                             {"num_classes", model.num_classes()},
                             {"tensors", tensors}};
  const std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(kCheckpointMagic, kMagicLen);
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : named)
    out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  if (!out) throw IoError("write to '" + path + "' failed");
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  char magic[kMagicLen];
  in.read(magic, kMagicLen);
  if (in.gcount() != static_cast<std::streamsize>(kMagicLen) || std::string_view(magic, kMagicLen) != kCheckpointMagic) {
    throw FormatError("'" + path + "' is not a checkpoint (bad magic)");
  }
  const auto version = read_pod_array<std::uint32_t>(in, 1, "checkpoint version")[0];
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  const auto len = read_pod_array<std::uint64_t>(in, 1, "checkpoint manifest length")[0];
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (static_cast<std::uint64_t>(in.gcount()) != len) throw TruncatedFileError("checkpoint manifest is truncated");

  Model model;
  try {
    const auto manifest = nlohmann::json::parse(text);
    EncoderConfig cfg;
    const auto& e = manifest.at("encoder");
    cfg.num_layers = e.at("num_layers");
    cfg.prompt_depth = e.at("prompt_depth");
    cfg.prompt_len = e.at("prompt_len");
    cfg.text_width = e.at("text_width");
    cfg.vision_width = e.at("vision_width");
    cfg.embed_width = e.at("embed_width");
    cfg.num_heads = e.at("num_heads");
    cfg.num_patch_tokens = e.at("num_patch_tokens");
    cfg.mlp_ratio = e.at("mlp_ratio");
    cfg.temperature = e.at("temperature");
    cfg.positional = e.at("positional");
    cfg.init_std = e.at("init_std");
    const std::size_t classes = manifest.at("num_classes");
    Rng rng(0);
    model = make_model(cfg, parse_objective(manifest.at("objective").get<std::string>()),
                       parse_prompt_mode(manifest.at("prompt_mode").get<std::string>()),
                       Tensor::zeros({classes, cfg.text_width}), rng);
    const auto& entries = manifest.at("tensors");
    std::size_t index = 0;
    visit(model, [&](const std::string& name, Tensor& t) {
      if (index >= entries.size()) throw ShapeMismatchError("checkpoint has no tensor for '" + name + "'");
      const auto& entry = entries[index++];
      if (entry.at("name").get<std::string>() != name) {
        throw ShapeMismatchError("checkpoint tensor '" + entry.at("name").get<std::string>() + "' where '" + name +
                                 "' was expected");
      }
      const Shape shape = entry.at("shape").get<Shape>();
      if (shape != t.shape()) {
        throw ShapeMismatchError("checkpoint tensor '" + name + "' has shape " + shape_to_string(shape) +
                                 ", model expects " + shape_to_string(t.shape()));
      }
      auto values = read_pod_array<double>(in, t.numel(), "checkpoint tensor '" + name + "'");
      t = Tensor(shape, std::move(values), t.requires_grad());
    });
    if (index != entries.size()) throw ShapeMismatchError("checkpoint holds tensors the model does not have");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint manifest: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw FormatError("checkpoint manifest: " + std::string(e.what()));
  }
  return model;
}

}  // namespace dimple
