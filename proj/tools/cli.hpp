#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sphere_attn::cli {

// Exit statuses.
inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;  // gradcheck over tolerance, numeric failures
inline constexpr int kExitConfig = 2;       // bad flags, config file or dimensions
inline constexpr int kExitIo = 3;           // unreadable / malformed / unwritable files

/// Runs one `sphere_attn` invocation. `args` excludes the program name.
/// JSON results go to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sphere_attn::cli
