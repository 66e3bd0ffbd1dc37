// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

#include "dimple/ops.hpp"
#include "dimple/rng.hpp"
#include "dimple/tensor.hpp"

namespace dimple {

/// Affine map on row vectors: y = x W + b, with W stored as [in × out].
struct LinearMap {
  Tensor weight;
  Tensor bias;

  Tensor operator()(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }
  std::size_t in_features() const { return weight.rows(); }
  std::size_t out_features() const { return weight.cols(); }

  static LinearMap gaussian(std::size_t in, std::size_t out, double stddev, Rng& rng);
  static LinearMap identity(std::size_t n);
  static LinearMap zero(std::size_t in, std::size_t out);
};

/// Leaf with i.i.d. N(0, stddev^2) entries that requires a gradient.
Tensor gaussian_parameter(Shape shape, double stddev, Rng& rng);

/// Identity matrix plus N(0, stddev^2) noise, as a trainable leaf.
Tensor near_identity_parameter(std::size_t n, double stddev, Rng& rng);

/// Trainable copy of `values`.
Tensor parameter(const Tensor& values);

}  // namespace dimple
