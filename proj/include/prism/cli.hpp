#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "prism/errors.hpp"
#include "prism/registry.hpp"

namespace prism {

enum class RunMode { train, infer };

struct RunCommand {
    RunMode mode = RunMode::train;
    std::vector<int> task_ids;
    std::string benchmark;
    std::string method;
    std::filesystem::path config_dir = "config";
    std::optional<int> seed;
    std::optional<std::string> out_dir;
    std::vector<std::string> plugin_roots;
};

/// Process exit status for an error code: 2 usage, 3 unknown name, 4 data, 5 internal.
int exit_code_for(Errc code);

/// Modes, flags and the live registry contents.
std::string help_text(const Registries& registries);

/// Parses `argv` (argv[0] is the program). Returns nullopt after printing
/// help to `out`. Raises UsageError on malformed input.
std::optional<RunCommand> parse_cli(const std::vector<std::string>& args, const Registries& registries,
                                    std::ostream& out);

/// Executes a parsed command and returns its exit status. Errors are
/// reported on `err`.
int run(const RunCommand& command, std::ostream& out, std::ostream& err);

/// Discovers plugins, parses and runs.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace prism
