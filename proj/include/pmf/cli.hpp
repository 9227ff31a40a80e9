#pragma once

#include <string>
#include <vector>

namespace pmf {

/// Command-line front end. argv[0] is the program name. Returns 0 on success,
/// 1 on a usage or configuration error, 2 on a runtime error.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);

}  // namespace pmf
