#pragma once

#include <iosfwd>

namespace hart::cli {

enum ExitCode : int { kOk = 0, kValidation = 1, kNumeric = 2 };

/// Parses argv and runs one subcommand. Outputs land in --out-dir, or in
/// $HAL_OUT_DIR when that is set.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace hart::cli
