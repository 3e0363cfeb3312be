#pragma once

#include <iosfwd>

namespace convreg::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

/// Entry point of the `convreg` tool. Subcommands: phantom, train, classify,
/// register, evaluate, sweep. Returns 0 on success, 1 on usage errors and 2 on
/// data or configuration errors.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace convreg::cli
