#pragma once

#include <ostream>

namespace mudpt {

/// Exit statuses of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,  // a check did not pass, or an unclassified error
  kExitConfig = 2,
  kExitNumeric = 3,
  kExitIo = 4,
};

/// Entry point of the `mudpt` tool: run, gen-data, pretrain, grad-check and
/// report-diff. Results go to `out`, diagnostics and progress to `err`.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mudpt
