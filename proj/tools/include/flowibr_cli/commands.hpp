#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace flowibr::cli {

/// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2 };

/// Parses `args` (without the program name) and runs the subcommand.
/// Configuration is validated before anything is written.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace flowibr::cli
