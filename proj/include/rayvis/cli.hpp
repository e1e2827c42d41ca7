// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace rayvis {

inline constexpr const char *kVersion = "0.1.0";

/// Process exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitInput = 2, kExitNumerical = 3 };

/// Runs the command-line tool with the given arguments (argv[0] excluded).
int run_cli(const std::vector<std::string> &args, std::ostream &out, std::ostream &err);

} // namespace rayvis
