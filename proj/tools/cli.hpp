#pragma once

#include <memory>
#include <ostream>
#include <string>
#include <vector>

namespace CLI {
class App;
}

namespace seqret::cli {

/// The full command tree with every subcommand and flag registered. Option
/// values are bound to storage owned by the returned object.
struct CommandLine {
  std::unique_ptr<CLI::App> app;
  std::shared_ptr<void> state;
};
CommandLine make_command_line();

/// Parses `args` (without the program name), runs the selected subcommand and
/// returns the exit status. Failures print one line to `err`:
///   error\t<kind>\t<message>
/// with kind one of usage, data, format, numeric, runtime.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace seqret::cli
