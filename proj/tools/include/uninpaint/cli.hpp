#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace uninpaint {

// Entry point of the `uninpaint` tool. args[0] is the program name. Returns
// the process exit status; failures print one `error: kind=... msg="..."`
// line on `err` and remove whatever the command had written.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace uninpaint
