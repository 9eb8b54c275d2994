#pragma once

#include <string>
#include <vector>

namespace ipa {

// Entry point of the `ipa` binary, exposed so tests can drive the command
// layer in-process. `args` is argv without the program name. Errors print to
// stderr; the return value is the process exit code (0 on success).
int run_cli(const std::vector<std::string>& args);

}  // namespace ipa
