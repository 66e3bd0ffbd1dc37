// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dimple/layers.hpp"
#include "dimple/rng.hpp"
#include "dimple/tensor.hpp"

namespace dimple {

/// Linear maps splitting each modality's joint embedding into an invariant
/// and a spurious part.
struct HeadSet {
  LinearMap vision_invariant;
  LinearMap vision_spurious;
  LinearMap text_invariant;
  LinearMap text_spurious;
};

enum class HeadInit {
  gaussian,       // all four heads N(0, stddev^2), zero bias
  near_identity,  // invariant heads I + N(0, stddev^2), spurious heads N(0, stddev^2)
};

std::string to_string(HeadInit init);
HeadInit parse_head_init(std::string_view name);

HeadSet make_heads(std::size_t width, double stddev, Rng& rng, HeadInit init = HeadInit::gaussian);
HeadSet identity_heads(std::size_t width);

/// Unit-norm invariant and spurious features for one batch.
struct FeatureBundle {
  Tensor vision_invariant;  // [N × d]
  Tensor vision_spurious;   // [N × d]
  Tensor text_invariant;    // [C × d]
  Tensor text_spurious;     // [C × d]
  std::vector<int> labels;  // N indices into the text rows
};

/// Applies the four heads and re-normalizes each output row.
FeatureBundle decompose(const Tensor& image_emb, const Tensor& text_emb, const HeadSet& heads,
                        std::span<const int> labels);

/// Throws DimensionError unless labels index rows of a C-row text matrix.
void check_labels(std::span<const int> labels, std::size_t num_samples, std::size_t num_classes);

}  // namespace dimple
