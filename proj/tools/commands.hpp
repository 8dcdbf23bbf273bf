#pragma once

// Command-line front end. Exit codes: 0 success, 1 runtime failure, 2 usage
// error (bad flags, invalid configuration, no usable window).

#include <ostream>
#include <string>
#include <vector>

namespace npm::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace npm::cli
