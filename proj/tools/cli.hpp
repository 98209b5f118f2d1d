#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace fumnet::cli {

enum ExitCode : int { ok = 0, failure = 1, usage = 2, data = 3 };

/// Entry point shared by the executable and the tests. `args` excludes the
/// program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace fumnet::cli
