#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace hcsc::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Runs one `hcsc` invocation. args[0] is the program name.
/// Returns 0 on success, 1 on a usage error (usage text on `err`), 2 on a
/// runtime failure.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, char** argv);

}  // namespace hcsc::cli
