// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dimple/encoder.hpp"
#include "dimple/heads.hpp"
#include "dimple/independence.hpp"
#include "dimple/objectives.hpp"
#include "dimple/rng.hpp"

namespace dimple {

enum class Objective { dimple, dimple_early, coop, coop_ood };

std::string to_string(Objective objective);
Objective parse_objective(std::string_view name);
/// Throws ConfigError unless early objective and early prompts go together.
void check_compatible(Objective objective, PromptMode mode);

using NamedTensor = std::pair<std::string, Tensor>;

/// Both encoders, the prompt bank, and the decomposition heads.
struct Model {
  EncoderConfig config;
  Objective objective = Objective::dimple;
  TextEncoder text;
  VisionEncoder vision;
  PromptBank bank;
  HeadSet heads;

  /// Every tensor of the model state in a fixed order, including the frozen
  /// token table.
  std::vector<NamedTensor> named_tensors() const;
  /// Trainable tensors. Encoder weights are included when `with_encoders`.
  std::vector<NamedTensor> named_parameters(bool with_encoders = true) const;
  std::size_t num_classes() const { return text.vocab.num_classes; }
};

/// Class tokens take `class_embeddings` [C × text_width].
Model make_model(const EncoderConfig& cfg, Objective objective, PromptMode mode, const Tensor& class_embeddings,
                 Rng& rng, HeadInit head_init = HeadInit::gaussian);

/// Deep copy with fresh leaves (no shared storage with `model`).
Model clone(const Model& model);

/// Training loss on one batch. `labels` are global class ids drawn from
/// `class_ids`; logits range over `class_ids` in order.
LossReport model_loss(const Model& model, const Tensor& images, std::span<const int> labels,
                      std::span<const int> class_ids, const LossWeights& w, const std::optional<KernelSpec>& kernel);

/// Invariant-pathway image and class features used for prediction.
std::pair<Tensor, Tensor> invariant_features(const Model& model, const Tensor& images, std::span<const int> class_ids);

/// All four feature blocks (invariant and spurious, vision and text). For
/// objectives without a decomposition the same features fill both slots.
FeatureBundle export_features(const Model& model, const Tensor& images, std::span<const int> labels,
                              std::span<const int> class_ids);

/// Argmax over the invariant class probabilities; returns global class ids.
/// Runs chunks of images on up to `threads` threads.
std::vector<int> predict(const Model& model, const Tensor& images, std::span<const int> class_ids,
                         std::size_t threads = 1);

/// Index of each label within class_ids.
std::vector<int> local_labels(std::span<const int> labels, std::span<const int> class_ids);

void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace dimple
