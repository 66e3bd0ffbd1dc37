// SPDX-License-Identifier: Apache-2.0
#include "dimple/independence.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "dimple/errors.hpp"
#include "dimple/ops.hpp"

namespace dimple {

namespace {

double choose_bandwidth(const Tensor& x, const KernelSpec& spec) {
  auto& tape = spec.tape;
  if (tape && tape->replaying) {
    if (tape->cursor >= tape->values.size()) throw ContractError("bandwidth tape exhausted during replay");
    return tape->values[tape->cursor++];
  }
  double sigma = spec.sigma;
  if (spec.rule == BandwidthRule::median) {
    sigma = median_distance(x);
    if (!(sigma > 0.0)) sigma = spec.fallback_sigma;
  }
  if (tape) tape->values.push_back(sigma);
  return sigma;
}

}  // namespace

void KernelSpec::validate() const {
  if (rule == BandwidthRule::fixed && !(sigma > 0.0)) throw ConfigError("kernel: fixed sigma must be positive");
  if (!(fallback_sigma > 0.0)) throw ConfigError("kernel: fallback sigma must be positive");
}

double median_distance(const Tensor& x) {
  const std::size_t n = x.rows(), p = x.cols();
  auto d = x.data();
  std::vector<double> dists;
  dists.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < p; ++k) {
        const double diff = d[i * p + k] - d[j * p + k];
        s += diff * diff;
      }
      dists.push_back(std::sqrt(s));
    }
  }
  if (dists.empty()) return 0.0;
  std::sort(dists.begin(), dists.end());
  const std::size_t m = dists.size();
  return m % 2 == 1 ? dists[m / 2] : 0.5 * (dists[m / 2 - 1] + dists[m / 2]);
}

Tensor gram(const Tensor& x, const KernelSpec& spec) {
  if (x.dim() != 2) throw DimensionError("gram: expected a matrix, got " + shape_to_string(x.shape()));
  if (spec.kind == KernelKind::linear) return matmul(x, transpose(x));
  const double sigma = choose_bandwidth(x, spec);
  return exp(scale(pairwise_sq_dists(x), -1.0 / (2.0 * sigma * sigma)));
}

Tensor hsic(const Tensor& x, const Tensor& y, const KernelSpec& spec) {
  if (x.dim() != 2 || y.dim() != 2 || x.rows() != y.rows()) {
    throw DimensionError("hsic: sample counts differ for " + shape_to_string(x.shape()) + " and " +
                         shape_to_string(y.shape()));
  }
  const std::size_t n = x.rows();
  if (n < 2) throw SampleSizeError("hsic needs at least 2 samples, got " + std::to_string(n));
  Tensor kc = center_gram(gram(x, spec));
  Tensor lc = center_gram(gram(y, spec));
  const double denom = static_cast<double>(n - 1) * static_cast<double>(n - 1);
  return relu(scale(sum(kc * lc), 1.0 / denom));
}

Tensor conditional_hsic(const Tensor& x, const Tensor& y, std::span<const int> labels, const KernelSpec& spec) {
  if (x.dim() != 2 || y.dim() != 2 || x.rows() != y.rows() || labels.size() != x.rows()) {
    throw DimensionError("conditional_hsic: " + std::to_string(labels.size()) + " labels for inputs " +
                         shape_to_string(x.shape()) + " and " + shape_to_string(y.shape()));
  }
  std::map<int, std::vector<int>> strata;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) throw DimensionError("conditional_hsic: negative label");
    strata[labels[i]].push_back(static_cast<int>(i));
  }
  const double n = static_cast<double>(labels.size());
  Tensor total;
  for (const auto& [label, idx] : strata) {
    if (idx.size() < 2) continue;
    Tensor term = scale(hsic(gather_rows(x, idx), gather_rows(y, idx), spec), static_cast<double>(idx.size()) / n);
    total = total.numel() == 0 ? term : total + term;
  }
  if (total.numel() == 0) {
    throw EstimatorUndefinedError("conditional_hsic: no class has two or more samples among " +
                                  std::to_string(labels.size()));
  }
  return total;
}

Tensor cmi_loss(const FeatureBundle& bundle, const KernelSpec& spec) {
  Tensor vision = conditional_hsic(bundle.vision_invariant, bundle.vision_spurious, bundle.labels, spec);
  Tensor text = conditional_hsic(gather_rows(bundle.text_invariant, bundle.labels),
                                 gather_rows(bundle.text_spurious, bundle.labels), bundle.labels, spec);
  return scale(vision + text, 0.5);
}

}  // namespace dimple
