// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "dimple/heads.hpp"
#include "dimple/tensor.hpp"

namespace dimple {

enum class KernelKind { rbf, linear };
enum class BandwidthRule { median, fixed };

/// Records the bandwidths chosen by successive estimator calls and can replay
/// them, so that finite-difference probes see the same kernels as the
/// analytic pass.
struct BandwidthTape {
  std::vector<double> values;
  std::size_t cursor = 0;
  bool replaying = false;

  void start_replay() {
    replaying = true;
    cursor = 0;
  }
};

struct KernelSpec {
  KernelKind kind = KernelKind::rbf;
  BandwidthRule rule = BandwidthRule::median;
  double sigma = 1.0;           // used by the fixed rule
  double fallback_sigma = 1.0;  // used when the median distance is zero
  std::shared_ptr<BandwidthTape> tape;

  void validate() const;
};

/// Median of the pairwise Euclidean distances over i < j.
double median_distance(const Tensor& x);

/// Gram matrix of the rows of x (no gradient through the bandwidth).
Tensor gram(const Tensor& x, const KernelSpec& spec);

/// Biased empirical HSIC, (n-1)^-2 tr(K H L H), clamped at zero.
Tensor hsic(const Tensor& x, const Tensor& y, const KernelSpec& spec);

/// Sum over classes with at least two samples of (n_c / n) hsic(x_c, y_c).
Tensor conditional_hsic(const Tensor& x, const Tensor& y, std::span<const int> labels, const KernelSpec& spec);

/// Mean of the vision and text class-conditioned HSIC between invariant and
/// spurious features. Text rows are expanded to one row per sample by label.
Tensor cmi_loss(const FeatureBundle& bundle, const KernelSpec& spec);

}  // namespace dimple
