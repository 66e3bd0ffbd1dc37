// SPDX-License-Identifier: Apache-2.0
#include "dimple/objectives.hpp"

#include <cmath>
#include <string>

#include "dimple/errors.hpp"
#include "dimple/ops.hpp"

namespace dimple {

namespace {

void require_classes(const Tensor& text) {
  if (text.dim() != 2 || text.rows() < 2) {
    throw DegenerateTaskError("classification needs at least 2 classes, got text embeddings " +
                              shape_to_string(text.shape()));
  }
}

LossReport assemble(Tensor ce, Tensor sp, Tensor cmi, const LossWeights& w) {
  LossReport r;
  r.total = ce + scale(sp, w.alpha) + scale(cmi, w.beta);
  r.ce = std::move(ce);
  r.spurious = std::move(sp);
  r.cmi = std::move(cmi);
  return r;
}

}  // namespace

void LossWeights::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("loss: alpha must be non-negative");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("loss: beta must be non-negative");
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("loss: tau must be positive");
}

Tensor cosine_logits(const Tensor& image, const Tensor& text, double tau) {
  if (image.dim() != 2 || text.dim() != 2 || image.cols() != text.cols()) {
    throw DimensionError("cosine_logits: widths differ for " + shape_to_string(image.shape()) + " and " +
                         shape_to_string(text.shape()));
  }
  return scale(matmul(image, transpose(text)), 1.0 / tau);
}

std::pair<Tensor, Tensor> contrastive_ce(const Tensor& image, const Tensor& text, std::span<const int> labels,
                                         double tau) {
  require_classes(text);
  check_labels(labels, image.rows(), text.rows());
  Tensor logits = cosine_logits(image, text, tau);
  Tensor loss = scale(mean(pick(log_softmax(logits), labels)), -1.0);
  return {loss, softmax(logits)};
}

std::pair<Tensor, Tensor> uniformity_kl(const Tensor& image, const Tensor& text, double tau) {
  require_classes(text);
  Tensor logits = cosine_logits(image, text, tau);
  Tensor p = softmax(logits);
  const double log_c = std::log(static_cast<double>(text.rows()));
  Tensor kl = sum(p * add_scalar(log_softmax(logits), log_c));
  // KL is non-negative; the clamp only removes rounding below zero.
  return {relu(scale(kl, 1.0 / static_cast<double>(image.rows()))), p};
}

std::pair<Tensor, Tensor> invariant_ce(const FeatureBundle& bundle, const LossWeights& w) {
  return contrastive_ce(bundle.vision_invariant, bundle.text_invariant, bundle.labels, w.tau);
}

std::pair<Tensor, Tensor> spurious_uniformity(const FeatureBundle& bundle, const LossWeights& w) {
  return uniformity_kl(bundle.vision_spurious, bundle.text_spurious, w.tau);
}

LossReport dimple_total(const FeatureBundle& bundle, const LossWeights& w, const std::optional<KernelSpec>& kernel) {
  auto [ce, p_u] = invariant_ce(bundle, w);
  auto [sp, p_s] = spurious_uniformity(bundle, w);
  Tensor cmi = kernel ? cmi_loss(bundle, *kernel) : Tensor::scalar(0.0);
  LossReport r = assemble(ce, sp, cmi, w);
  r.p_invariant = p_u;
  r.p_spurious = p_s;
  return r;
}

LossReport early_total(const Tensor& text_inv, const Tensor& text_spu, const Tensor& image_inv,
                       const Tensor& image_spu, std::span<const int> labels, const LossWeights& w,
                       const std::optional<KernelSpec>& kernel) {
  auto [ce, p_u] = contrastive_ce(image_inv, text_inv, labels, w.tau);
  auto [sp, p_s] = uniformity_kl(image_spu, text_spu, w.tau);
  Tensor cmi = kernel ? conditional_hsic(image_inv, image_spu, labels, *kernel) : Tensor::scalar(0.0);
  LossReport r = assemble(ce, sp, cmi, w);
  r.p_invariant = p_u;
  r.p_spurious = p_s;
  return r;
}

LossReport coop_baseline(const Tensor& image, const Tensor& text, std::span<const int> labels, const LossWeights& w) {
  auto [ce, p] = contrastive_ce(image, text, labels, w.tau);
  LossReport r;
  r.total = ce;
  r.ce = ce;
  r.spurious = Tensor::scalar(0.0);
  r.cmi = Tensor::scalar(0.0);
  r.p_invariant = p;
  return r;
}

LossReport coop_ood_baseline(const Tensor& image, const Tensor& text, const LinearMap& vision_invariant,
                             const LinearMap& vision_spurious, std::span<const int> labels, const LossWeights& w,
                             const std::optional<KernelSpec>& kernel) {
  Tensor inv = normalize_rows(vision_invariant(image));
  Tensor spu = normalize_rows(vision_spurious(image));
  auto [ce, p_u] = contrastive_ce(inv, text, labels, w.tau);
  auto [sp, p_s] = uniformity_kl(spu, text, w.tau);
  Tensor cmi = kernel ? conditional_hsic(inv, spu, labels, *kernel) : Tensor::scalar(0.0);
  LossReport r = assemble(ce, sp, cmi, w);
  r.p_invariant = p_u;
  r.p_spurious = p_s;
  return r;
}

}  // namespace dimple
