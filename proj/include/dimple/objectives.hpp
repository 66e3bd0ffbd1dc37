// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <utility>

#include "dimple/heads.hpp"
#include "dimple/independence.hpp"
#include "dimple/tensor.hpp"

namespace dimple {

struct LossWeights {
  double alpha = 1.0;  // spurious uniformity
  double beta = 1.0;   // conditional independence
  double tau = 0.07;   // softmax temperature

  void validate() const;
};

/// Scalar loss terms plus the class probabilities behind them. The spurious
/// probabilities are undefined for objectives without a spurious pathway.
struct LossReport {
  Tensor total;
  Tensor ce;
  Tensor spurious;
  Tensor cmi;
  Tensor p_invariant;  // [N × C]
  Tensor p_spurious;   // [N × C]
};

/// Row i of the result holds cos(image_i, class_c) / tau for unit-norm rows.
Tensor cosine_logits(const Tensor& image, const Tensor& text, double tau);

/// Mean negative log-likelihood of the labelled class under the softmax over
/// classes, with the softmax probabilities.
std::pair<Tensor, Tensor> contrastive_ce(const Tensor& image, const Tensor& text, std::span<const int> labels,
                                         double tau);

/// Mean KL(p || uniform) of the class softmax, with the probabilities.
std::pair<Tensor, Tensor> uniformity_kl(const Tensor& image, const Tensor& text, double tau);

std::pair<Tensor, Tensor> invariant_ce(const FeatureBundle& bundle, const LossWeights& w);
std::pair<Tensor, Tensor> spurious_uniformity(const FeatureBundle& bundle, const LossWeights& w);

/// ce + alpha * spurious + beta * cmi. Without a kernel the cmi term is 0.
LossReport dimple_total(const FeatureBundle& bundle, const LossWeights& w, const std::optional<KernelSpec>& kernel);

/// Early variant: alignment on the invariant encodings, uniformity on the
/// spurious ones, and a vision-only independence term.
LossReport early_total(const Tensor& text_inv, const Tensor& text_spu, const Tensor& image_inv,
                       const Tensor& image_spu, std::span<const int> labels, const LossWeights& w,
                       const std::optional<KernelSpec>& kernel);

/// Plain contrastive alignment of undecomposed embeddings.
LossReport coop_baseline(const Tensor& image, const Tensor& text, std::span<const int> labels, const LossWeights& w);

/// Vision-only decomposition aligned against the shared text embeddings.
LossReport coop_ood_baseline(const Tensor& image, const Tensor& text, const LinearMap& vision_invariant,
                             const LinearMap& vision_spurious, std::span<const int> labels, const LossWeights& w,
                             const std::optional<KernelSpec>& kernel);

}  // namespace dimple
