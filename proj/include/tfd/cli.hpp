#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace tfd {

// A run that failed numerically (non-finite loss, aborted training stage)
// rather than from bad input. Mapped to exit code 2.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Entry point shared by the tfd binary and the test harness; `args` excludes
// the program name. Exit codes: 0 success, 1 input/config error, 2 numeric
// failure.
int run_cli(const std::vector<std::string>& args);

} // namespace tfd
