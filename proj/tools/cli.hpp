#pragma once

// Command-line entry point: gen-data, train, eval, retarget, baseline,
// gradcheck and render.

#include <ostream>
#include <string>
#include <vector>

namespace mrt::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitDomain = 1;
inline constexpr int kExitUsage = 2;

// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mrt::cli
