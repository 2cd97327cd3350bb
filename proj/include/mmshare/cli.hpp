#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mmshare {

/// Exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,      // invalid config or spec, budget mismatch, missing file
  kExitDivergence = 3,  // loss became non-finite
  kExitCheckpoint = 4,  // unreadable or corrupt checkpoint
};

/// Runs `mmshare <args...>` in-process. Subcommands: train, eval, compare,
/// sweep, generate, params. MMSHARE_OUT and MMSHARE_JOBS supply --out and
/// --jobs when the flags are absent.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mmshare
