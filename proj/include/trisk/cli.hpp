#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace trisk {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumerical = 3 };

/// Runs one subcommand (synth, train, finetune, eval, explain, baseline-fit,
/// baseline-eval). `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace trisk
