// SPDX-License-Identifier: Apache-2.0
#include "dimple/layers.hpp"

namespace dimple {

Tensor gaussian_parameter(Shape shape, double stddev, Rng& rng) {
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = stddev * rng.normal();
  return Tensor(std::move(shape), std::move(values), true);
}

Tensor near_identity_parameter(std::size_t n, double stddev, Rng& rng) {
  std::vector<double> values(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) values[i * n + j] = (i == j ? 1.0 : 0.0) + stddev * rng.normal();
  return Tensor({n, n}, std::move(values), true);
}

Tensor parameter(const Tensor& values) {
  return Tensor(values.shape(), std::vector<double>(values.data().begin(), values.data().end()), true);
}

LinearMap LinearMap::gaussian(std::size_t in, std::size_t out, double stddev, Rng& rng) {
  return {gaussian_parameter({in, out}, stddev, rng), Tensor::zeros({out}, true)};
}

LinearMap LinearMap::identity(std::size_t n) { return {Tensor::identity(n, true), Tensor::zeros({n}, true)}; }

LinearMap LinearMap::zero(std::size_t in, std::size_t out) {
  return {Tensor::zeros({in, out}, true), Tensor::zeros({out}, true)};
}

}  // namespace dimple
