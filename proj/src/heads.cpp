// SPDX-License-Identifier: Apache-2.0
#include "dimple/heads.hpp"

#include <string>

#include "dimple/errors.hpp"
#include "dimple/ops.hpp"

namespace dimple {

std::string to_string(HeadInit init) { return init == HeadInit::gaussian ? "gaussian" : "near_identity"; }

HeadInit parse_head_init(std::string_view name) {
  if (name == "gaussian") return HeadInit::gaussian;
  if (name == "near_identity") return HeadInit::near_identity;
  throw ConfigError("unknown head init '" + std::string(name) + "' (expected gaussian or near_identity)");
}

HeadSet make_heads(std::size_t width, double stddev, Rng& rng, HeadInit init) {
  auto invariant = [&] {
    if (init == HeadInit::gaussian) return LinearMap::gaussian(width, width, stddev, rng);
    return LinearMap{near_identity_parameter(width, stddev, rng), Tensor::zeros({width}, true)};
  };
  HeadSet h;
  h.vision_invariant = invariant();
  h.vision_spurious = LinearMap::gaussian(width, width, stddev, rng);
  h.text_invariant = invariant();
  h.text_spurious = LinearMap::gaussian(width, width, stddev, rng);
  return h;
}

HeadSet identity_heads(std::size_t width) {
  return {LinearMap::identity(width), LinearMap::identity(width), LinearMap::identity(width),
          LinearMap::identity(width)};
}

void check_labels(std::span<const int> labels, std::size_t num_samples, std::size_t num_classes) {
  if (labels.size() != num_samples) {
    throw DimensionError(std::to_string(labels.size()) + " labels for " + std::to_string(num_samples) + " samples");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw DimensionError("label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

FeatureBundle decompose(const Tensor& image_emb, const Tensor& text_emb, const HeadSet& heads,
                        std::span<const int> labels) {
  auto check = [](const Tensor& x, const LinearMap& m, const char* what) {
    if (x.dim() != 2 || x.cols() != m.in_features()) {
      throw DimensionError(std::string("decompose: ") + what + " features " + shape_to_string(x.shape()) +
                           " do not match head input width " + std::to_string(m.in_features()));
    }
  };
  check(image_emb, heads.vision_invariant, "image");
  check(image_emb, heads.vision_spurious, "image");
  check(text_emb, heads.text_invariant, "text");
  check(text_emb, heads.text_spurious, "text");
  check_labels(labels, image_emb.rows(), text_emb.rows());
  FeatureBundle f;
  f.vision_invariant = normalize_rows(heads.vision_invariant(image_emb));
  f.vision_spurious = normalize_rows(heads.vision_spurious(image_emb));
  f.text_invariant = normalize_rows(heads.text_invariant(text_emb));
  f.text_spurious = normalize_rows(heads.text_spurious(text_emb));
  f.labels.assign(labels.begin(), labels.end());
  return f;
}

}  // namespace dimple
