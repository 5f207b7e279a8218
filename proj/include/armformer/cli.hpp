#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace armformer::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitIo = 2,
  kExitValidation = 3,
};

/// Subcommands: synth, train, eval, infer, bench, gradcheck. `args` excludes
/// the program name. Errors are reported as one line on `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace armformer::cli
