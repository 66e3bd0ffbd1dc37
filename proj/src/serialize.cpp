// SPDX-License-Identifier: Apache-2.0
#include "dimple/serialize.hpp"

#include <cstdio>
#include <cstdlib>

#include "dimple/errors.hpp"

namespace dimple {

nlohmann::json to_json(const TaskSpec& s) {
  return {{"num_classes", s.num_classes},
          {"samples_per_class", s.samples_per_class},
          {"test_samples_per_class", s.test_samples_per_class},
          {"attr_cardinality", s.attr_cardinality},
          {"train_correlation", s.train_correlation},
          {"test_correlation", s.test_correlation},
          {"noise_std", s.noise_std},
          {"core_norm", s.core_norm},
          {"spurious_norm", s.spurious_norm},
          {"num_patch_tokens", s.num_patch_tokens},
          {"width", s.width},
          {"seed", s.seed},
          {"shift_kind", to_string(s.shift_kind)},
          {"shift_magnitude", s.shift_magnitude}};
}

TaskSpec task_spec_from_json(const nlohmann::json& j) {
  try {
    TaskSpec s;
    s.num_classes = j.at("num_classes").get<std::size_t>();
    s.samples_per_class = j.at("samples_per_class").get<std::size_t>();
    s.test_samples_per_class = j.at("test_samples_per_class").get<std::size_t>();
    s.attr_cardinality = j.at("attr_cardinality").get<std::size_t>();
    s.train_correlation = j.at("train_correlation").get<double>();
    s.test_correlation = j.at("test_correlation").get<double>();
    s.noise_std = j.at("noise_std").get<double>();
    s.core_norm = j.at("core_norm").get<double>();
    s.spurious_norm = j.at("spurious_norm").get<double>();
    s.num_patch_tokens = j.at("num_patch_tokens").get<std::size_t>();
    s.width = j.at("width").get<std::size_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.shift_kind = parse_shift_kind(j.at("shift_kind").get<std::string>());
    s.shift_magnitude = j.at("shift_magnitude").get<double>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("task spec: ") + e.what());
  }
}

nlohmann::json to_json(const EncoderConfig& c) {
  return {{"num_layers", c.num_layers},       {"prompt_depth", c.prompt_depth},
          {"prompt_len", c.prompt_len},       {"text_width", c.text_width},
          {"vision_width", c.vision_width},   {"embed_width", c.embed_width},
          {"num_heads", c.num_heads},         {"num_patch_tokens", c.num_patch_tokens},
          {"mlp_ratio", c.mlp_ratio},         {"temperature", c.temperature},
          {"positional", c.positional},       {"init_std", c.init_std}};
}

nlohmann::json to_json(const LossWeights& w) { return {{"alpha", w.alpha}, {"beta", w.beta}, {"tau", w.tau}}; }

std::string format_double(double v) {
  char buf[40];
  for (int precision = 1; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

template <typename T>
std::vector<T> read_pod_array(std::istream& in, std::size_t count, const std::string& what) {
  std::vector<T> values(count);
  const auto bytes = static_cast<std::streamsize>(count * sizeof(T));
  in.read(reinterpret_cast<char*>(values.data()), bytes);
  if (in.gcount() != bytes) {
    throw TruncatedFileError(what + ": expected " + std::to_string(bytes) + " bytes, found " +
                             std::to_string(in.gcount()));
  }
  return values;
}

template std::vector<double> read_pod_array<double>(std::istream&, std::size_t, const std::string&);
template std::vector<std::int32_t> read_pod_array<std::int32_t>(std::istream&, std::size_t, const std::string&);
template std::vector<std::int64_t> read_pod_array<std::int64_t>(std::istream&, std::size_t, const std::string&);
template std::vector<std::uint32_t> read_pod_array<std::uint32_t>(std::istream&, std::size_t, const std::string&);
template std::vector<std::uint64_t> read_pod_array<std::uint64_t>(std::istream&, std::size_t, const std::string&);

}  // namespace dimple
