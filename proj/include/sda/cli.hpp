#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace sda {

// Entry point behind the `sda` binary. `args` excludes the program name.
// Exit codes: 0 success, 2 bad usage or configuration, 3 missing or
// mismatched data artifacts, 4 training divergence, 1 anything else.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace sda
