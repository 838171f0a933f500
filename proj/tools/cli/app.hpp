#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace stta::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitThreshold = 2,
  kExitRuntime = 3,
};

// Entry point of stta-bench; never throws.
int run_app(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace stta::cli
