// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Commands: trace, ablate, probe, gen, tokenize.
//
// Exit codes: 0 success, 2 usage error, 3 I/O or input-format error,
// 4 engine error.

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "finterp/tracing.hpp"

namespace finterp::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitEngine = 4;

/// Runs one command. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

/// Static heatmap: layers on y (layer 0 at the bottom), tokens on x, a
/// blue-white-red scale symmetric about zero and a tooltip per cell.
std::string heatmap_svg(const ImpactMap& map);

}  // namespace finterp::cli
