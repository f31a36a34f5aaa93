#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace flashsvd::cli {

// Parses command-line arguments (program name excluded) and executes one
// subcommand: compress, verify, bench, or plan.  Normal output goes to
// `out`, diagnostics to `err`.  Returns the process exit code:
//   0 success, 1 verification failure, 2 configuration error, 3 I/O error.
int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err);

// Convenience wrapper for main().
int run_cli(int argc, const char* const* argv);

}  // namespace flashsvd::cli
