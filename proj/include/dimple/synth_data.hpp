// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dimple/tensor.hpp"

namespace dimple {

enum class ShiftKind { noise_up, core_scale_down, attr_flip };
enum class Environment { train, test_id, test_shift };

std::string to_string(ShiftKind kind);
ShiftKind parse_shift_kind(std::string_view name);
std::string to_string(Environment env);
Environment parse_environment(std::string_view name);

struct TaskSpec {
  std::size_t num_classes = 4;
  std::size_t samples_per_class = 500;       // training samples per base class
  std::size_t test_samples_per_class = 250;  // per class in each evaluation split
  std::size_t attr_cardinality = 2;
  double train_correlation = 0.95;
  double test_correlation = 0.5;
  double noise_std = 1.0;
  double core_norm = 1.0;
  double spurious_norm = 2.0;
  std::size_t num_patch_tokens = 16;
  std::size_t width = 32;
  std::uint64_t seed = 0;
  ShiftKind shift_kind = ShiftKind::noise_up;
  double shift_magnitude = 1.0;

  void validate() const;
  std::size_t num_groups() const { return num_classes * attr_cardinality; }
  /// Attribute that class c is aligned with.
  int aligned_attr(int c) const { return c % static_cast<int>(attr_cardinality); }
};

/// First ceil(C/2) classes are base, the rest novel.
std::vector<int> base_classes(const TaskSpec& spec);
std::vector<int> novel_classes(const TaskSpec& spec);

/// Unit class and attribute directions, mutually orthogonal.
struct TaskGeometry {
  Tensor class_directions;  // [C × width]
  Tensor attr_directions;   // [A × width]
};

/// Images are rendered from their parts so that shifts can be re-applied
/// exactly: token t of sample n is
///   core_scale[n] * core_norm * class_dir[label]   (t <  T/2)
///   spurious_norm * attr_dir[painted_attr]          (t >= T/2)
/// plus noise[n, t].
struct LabeledBatch {
  Tensor images;  // [N × T × width]
  std::vector<int> labels;
  std::vector<int> attrs;         // attribute that defines the group
  std::vector<int> groups;        // label * A + attr
  std::vector<int> painted_attrs;  // attribute drawn into the image
  std::vector<std::int64_t> sample_ids;
  std::vector<double> noise;       // [N × T × width]
  std::vector<double> core_scale;  // [N]
  Environment env = Environment::train;
  TaskSpec spec;
  std::shared_ptr<const TaskGeometry> geometry;

  std::size_t size() const { return labels.size(); }
  /// Rows `indices`, in the given order.
  LabeledBatch subset(std::span<const std::size_t> indices) const;
  /// Samples whose label is in `classes`.
  LabeledBatch restrict_to(std::span<const int> classes) const;
  /// Recomputes images from the stored parts.
  void render();
};

struct SyntheticTask {
  TaskSpec spec;
  std::shared_ptr<const TaskGeometry> geometry;
  LabeledBatch train;       // base classes only
  LabeledBatch test_id;     // all classes, test correlation
  LabeledBatch test_shift;  // all classes, test correlation, then the configured shift
};

std::shared_ptr<const TaskGeometry> make_geometry(const TaskSpec& spec);
SyntheticTask generate(const TaskSpec& spec);

/// noise_up adds magnitude * N(0, 1) noise; core_scale_down multiplies the core
/// pattern by (1 - magnitude); attr_flip repaints a magnitude-fraction of
/// samples (chosen by sample id) with attribute (a + 1) mod A. Labels and
/// groups never change.
LabeledBatch domain_shift(const LabeledBatch& batch, ShiftKind kind, double magnitude, std::uint64_t seed = 0);

/// Nearest-class-direction prediction from the core tokens alone.
std::vector<int> core_oracle_predict(const LabeledBatch& batch);

void save_dataset(const SyntheticTask& task, const std::string& path);
SyntheticTask load_dataset(const std::string& path);

}  // namespace dimple
