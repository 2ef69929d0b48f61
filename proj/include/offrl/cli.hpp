#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace offrl {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitDivergence = 4;

// argv[0] is the program name. Diagnostics go to `err` as one line.
int run_command(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);
int run_command(int argc, const char* const* argv);

}  // namespace offrl
