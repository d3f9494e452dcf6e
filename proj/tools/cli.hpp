#pragma once

// Command-line front end. Every verb reads a flat key=value config
// (--config FILE) and lets --key value flags override it.

#include <iosfwd>
#include <string>
#include <vector>

namespace mmclip::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitStage = 3;

/// args excludes the program name. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mmclip::cli
