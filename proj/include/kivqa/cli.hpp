// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace kivqa {

// Runs one pipeline command (args exclude the program name). Returns the
// process exit code: 0 success, 2 configuration error, 3 data error,
// 4 numeric failure.
int run_command(const std::vector<std::string>& args);

}  // namespace kivqa
