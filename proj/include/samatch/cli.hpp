#pragma once

#include <iosfwd>

namespace samatch::cli {

enum ExitCode : int { kOk = 0, kValidationError = 1, kRuntimeError = 2 };

/// Parses and runs one command; errors are reported on `err` and mapped to
/// exit codes (validation 1, runtime 2).
int main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace samatch::cli
