// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dimple/layers.hpp"
#include "dimple/rng.hpp"
#include "dimple/tensor.hpp"

namespace dimple {

struct EncoderConfig {
  std::size_t num_layers = 4;    // transformer blocks per branch
  std::size_t prompt_depth = 3;  // blocks that receive fresh prompts
  std::size_t prompt_len = 2;    // prompt tokens per injected set
  std::size_t text_width = 32;
  std::size_t vision_width = 32;
  std::size_t embed_width = 32;  // joint image-text space
  std::size_t num_heads = 4;
  std::size_t num_patch_tokens = 16;
  std::size_t mlp_ratio = 2;
  double temperature = 0.07;
  bool positional = true;
  double init_std = 0.02;

  /// Throws ConfigError on an invalid combination.
  void validate() const;
  std::size_t vision_seq_len() const { return 1 + num_patch_tokens + prompt_len; }
};

inline constexpr std::string_view kStandardTemplate = "a photo of a";
inline constexpr std::string_view kInvariantTemplate = "a photo capturing core and invariant features of a";
inline constexpr std::string_view kSpuriousTemplate = "a photo with features that keep changing of a";

/// Frozen token table: template words, markers, and one token per class.
struct Vocabulary {
  std::vector<std::string> words;  // index is the token id
  Tensor embeddings;               // [size × text_width], no gradient
  std::size_t num_classes = 0;
  std::size_t first_class_token = 0;

  std::size_t size() const { return words.size(); }
  int id(std::string_view word) const;
  int class_token(std::size_t class_id) const;
};

/// Builds the vocabulary. Class tokens take the rows of `class_embeddings`
/// [num_classes × text_width]; every other word gets N(0, 1/width) entries.
Vocabulary make_vocabulary(const Tensor& class_embeddings, Rng& rng);

/// [SOS, template words padded with "X" to at least prompt_len, CLASS, EOS].
/// The first prompt_len template slots (offset 1) are prompt positions.
struct TokenizedClass {
  int class_id = 0;
  std::vector<int> tokens;
};

TokenizedClass tokenize_class(const Vocabulary& vocab, std::size_t class_id, std::string_view template_text,
                              std::size_t prompt_len);
std::vector<TokenizedClass> tokenize_classes(const Vocabulary& vocab, std::span<const int> class_ids,
                                             std::string_view template_text, std::size_t prompt_len);
std::vector<std::string> split_words(std::string_view text);

struct TransformerBlock {
  Tensor ln1_gain, ln1_shift;
  Tensor query, key, value;  // [d × d], no bias
  LinearMap out;
  Tensor ln2_gain, ln2_shift;
  LinearMap fc1, fc2;
};

/// Pre-LN transformer stack with a final norm and a bias-free projection
/// into the joint space.
struct Transformer {
  std::vector<TransformerBlock> blocks;
  Tensor positional;  // [max_seq × d], empty when disabled
  Tensor final_gain, final_shift;
  Tensor projection;  // [d × embed_width]
  std::size_t num_heads = 1;

  std::size_t width() const { return projection.rows(); }
};

Transformer make_transformer(std::size_t width, std::size_t max_seq_len, const EncoderConfig& cfg, Rng& rng);

/// Called with (block index from 1, block input) before every block.
using LayerObserver = std::function<void(std::size_t, const Tensor&)>;

/// Runs the stack over `x` [num_seq * seq_len × d]. Before block i (1-based,
/// i ≤ prompts.size()) rows prompt_offset .. prompt_offset + b of every
/// sequence are overwritten by prompts[i-1]. Returns the unit-norm joint
/// embedding of row `readout` of each sequence.
Tensor run_transformer(const Transformer& net, Tensor x, std::size_t seq_len, std::span<const Tensor> prompts,
                       std::size_t prompt_offset, std::size_t readout, const LayerObserver& observer = {});

struct TextEncoder {
  Vocabulary vocab;
  Transformer body;
};

struct VisionEncoder {
  Transformer body;
  Tensor cls;  // [1 × vision_width]
};

TextEncoder make_text_encoder(const EncoderConfig& cfg, const Tensor& class_embeddings, Rng& rng);
VisionEncoder make_vision_encoder(const EncoderConfig& cfg, Rng& rng);

enum class PromptMode { coupled, independent, early };

std::string to_string(PromptMode mode);
PromptMode parse_prompt_mode(std::string_view name);

/// Learnable prompts for both branches. Each vector holds one entry per
/// prompted block (prompt_depth entries, or none when prompt_len is 0).
struct PromptBank {
  PromptMode mode = PromptMode::coupled;
  std::string template_text{kStandardTemplate};

  std::vector<Tensor> text;            // [b × text_width]
  std::vector<LinearMap> coupling;     // coupled: text width -> vision width
  std::vector<Tensor> vision;          // independent: [b × vision_width]

  std::string invariant_template{kInvariantTemplate};
  std::string spurious_template{kSpuriousTemplate};
  std::vector<Tensor> text_invariant;  // early mode
  std::vector<Tensor> text_spurious;
  LinearMap to_vision_invariant;       // early mode, shared across blocks
  LinearMap to_vision_spurious;

  /// Vision prompts for the late modes (coupled maps are applied here).
  std::vector<Tensor> vision_prompts() const;
};

PromptBank make_prompt_bank(PromptMode mode, const EncoderConfig& cfg, const Vocabulary& vocab, Rng& rng);

Tensor encode_text(const TextEncoder& enc, std::span<const TokenizedClass> classes, std::span<const Tensor> prompts,
                   const EncoderConfig& cfg, const LayerObserver& observer = {});
/// Late-mode text embeddings [C × embed_width] using the bank's template.
Tensor encode_text(const TextEncoder& enc, std::span<const int> class_ids, const PromptBank& bank,
                   const EncoderConfig& cfg, const LayerObserver& observer = {});

/// Image embeddings [N × embed_width] for images [N × num_patch_tokens × vision_width].
Tensor encode_image(const VisionEncoder& enc, const Tensor& images, std::span<const Tensor> prompts,
                    const EncoderConfig& cfg, const LayerObserver& observer = {});
Tensor encode_image(const VisionEncoder& enc, const Tensor& images, const PromptBank& bank, const EncoderConfig& cfg,
                    const LayerObserver& observer = {});

/// Early mode: (invariant, spurious) text embeddings.
std::pair<Tensor, Tensor> encode_text_early(const TextEncoder& enc, std::span<const int> class_ids,
                                            const PromptBank& bank, const EncoderConfig& cfg);
/// Early mode: (invariant, spurious) image embeddings.
std::pair<Tensor, Tensor> encode_image_early(const VisionEncoder& enc, const Tensor& images, const PromptBank& bank,
                                             const EncoderConfig& cfg);

}  // namespace dimple
