#pragma once

#include <iosfwd>

namespace bsift::cli {

// Entry point of the `bsift` command. Exit codes: 0 success, 1 runtime
// failure, 2 usage or config error.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace bsift::cli
