#pragma once

namespace mmn::cli {

// Parses arguments, runs one subcommand and returns the process exit code:
// 0 on success, 2 on bad input (flags, config, files), 1 on runtime failure.
int run(int argc, char** argv);

}  // namespace mmn::cli
