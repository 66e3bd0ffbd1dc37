// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dimple {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;     // configuration, data, or check failure
inline constexpr int kExitDiverged = 2;  // training produced a non-finite loss

/// Parses `args` (without the program name), runs the selected command, and
/// returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

}  // namespace dimple
