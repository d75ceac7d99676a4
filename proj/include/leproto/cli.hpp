#pragma once

#include <ostream>

namespace leproto::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Entry point of the leproto tool. Exit 2 on bad flags, 1 on runtime failure.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace leproto::cli
