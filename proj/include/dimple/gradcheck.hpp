// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dimple/model.hpp"

namespace dimple {

/// Relative error |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Central-difference derivative of f() with respect to every element of
/// `param`, which must be a leaf whose values f reads on each call.
std::vector<double> numeric_gradient(const std::function<double()>& f, Tensor& param, double h = 1e-5);

/// Lets a test corrupt analytic gradients before they are compared.
using GradientFault = std::function<void(const std::string& tensor, std::vector<double>& grad)>;

struct TensorCheck {
  std::string name;
  std::string group;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::string label;
  std::vector<TensorCheck> tensors;
  std::map<std::string, double> group_worst;  // worst relative error per parameter group
  double threshold = 1e-4;
  bool passed = true;
  std::string worst_tensor;
  double worst_error = 0.0;
};

/// Parameter group of a model tensor name: prompts, coupling, heads or encoder.
std::string parameter_group(const std::string& name);

/// Compares backward() of `loss` against central differences for every
/// element of every tensor in `params`. `before_eval` runs ahead of each
/// forward pass (the analytic one first).
GradCheckReport check_gradients(const std::string& label, const std::function<Tensor()>& loss,
                                std::span<NamedTensor> params, double h = 1e-5, double threshold = 1e-4,
                                const std::function<void(bool analytic)>& before_eval = {},
                                const GradientFault& fault = {});

/// Micro model (2 layers, depth 2, 1 prompt token, width 8, 4 samples,
/// 3 classes) evaluated under each objective.
std::vector<GradCheckReport> run_gradcheck(std::uint64_t seed, const GradientFault& fault = {},
                                           std::span<const Objective> objectives = {});

}  // namespace dimple
