#pragma once

// Command-line front end: gen-data, pretrain, tune, eval, gradcheck, ablate.

#include <ostream>
#include <string>
#include <vector>

namespace capt {

enum ExitCode : int {
    exit_ok = 0,
    exit_failure = 1,
    exit_config = 2,
    exit_invariant = 3,
    exit_numeric = 4,
};

// `args` excludes the program name. Diagnostics go to `err`, progress and
// summaries to `out`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace capt
