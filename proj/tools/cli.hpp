#pragma once

#include <iosfwd>

namespace wemoe {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumerical = 3 };

// argv[0] is the program name.
int run_cli(int argc, const char * const * argv, std::ostream & out, std::ostream & err);

} // namespace wemoe
