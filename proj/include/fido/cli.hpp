#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace fido::cli {

enum ExitCode : int { kOk = 0, kRuntimeError = 1, kUsageError = 2 };

/// Runs the `fido_masks` command line; `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Worker count: explicit value if > 0, else FIDO_MASKS_JOBS, else 1.
int resolve_jobs(int requested);

}  // namespace fido::cli
