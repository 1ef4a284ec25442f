#pragma once

#include <iosfwd>

namespace rad2ct {

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumerical = 3 };

/// Runs the `rad2ct` command line. Output goes to `out`, diagnostics and help on
/// errors to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace rad2ct
