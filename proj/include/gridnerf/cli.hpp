// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ostream>

namespace gridnerf {

// Exit codes returned by run_cli.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,  // I/O and anything unclassified
  kExitConfig = 2,   // bad flags, config file, or unknown keys
  kExitData = 3,     // unreadable dataset or checkpoint
  kExitNumeric = 4,  // training diverged
};

// Subcommands: synth, train, render, eval, dump-planes.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace gridnerf
