#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ftq::cli {

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int {
  kOk = 0,
  kRunFailed = 1,         // a scenario ran but did not meet its success criterion
  kUsage = 2,             // bad flags
  kUnknownScenario = 3,
  kMalformedConfig = 4,
  kUnwritableOutput = 5,
  kInternalError = 6,
};

/// Command-line entry point. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ftq::cli
