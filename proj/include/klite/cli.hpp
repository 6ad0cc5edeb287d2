#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace klite::cli {

// Exit codes: 0 ok, 1 usage error, 2 data error, 3 numerical abort.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace klite::cli
