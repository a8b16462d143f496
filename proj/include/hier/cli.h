#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace hier {

// Exit codes shared by every subcommand.
enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 2,
  kExitData = 3,
  kExitNumeric = 4,
  kExitCheck = 5,
};

// Runs one subcommand (gen-synth, pretrain, finetune, zeroshot, eval,
// gradcheck, export-gates). `args` excludes the program name. Failures are
// reported on `err` as a single `error: kind=<kind> msg="<message>"` line.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace hier
