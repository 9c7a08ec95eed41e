#pragma once

#include <string>
#include <vector>

namespace cdiff::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kValidation = 3, kRuntime = 4 };

// Entry point of the `cdiff` tool. argv[0] is the program name.
int run(const std::vector<std::string>& argv);

} // namespace cdiff::cli
