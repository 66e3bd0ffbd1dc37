// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dimple/encoder.hpp"
#include "dimple/objectives.hpp"
#include "dimple/synth_data.hpp"

namespace dimple {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

nlohmann::json to_json(const TaskSpec& spec);
TaskSpec task_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const EncoderConfig& cfg);
nlohmann::json to_json(const LossWeights& w);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

template <typename T>
void write_pod_array(std::ostream& out, const std::vector<T>& values) {
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(T)));
}

/// Reads `count` values; throws TruncatedFileError when the stream ends early.
template <typename T>
std::vector<T> read_pod_array(std::istream& in, std::size_t count, const std::string& what);

}  // namespace dimple
