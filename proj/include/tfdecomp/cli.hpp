#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace tfdecomp {

inline constexpr int kExitOk = 0;
inline constexpr int kExitViolation = 1;  // e.g. a residual above tolerance
inline constexpr int kExitUsage = 2;      // bad flags, unreadable or invalid inputs

/// Runs the command-line interface; args[0] is the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tfdecomp
