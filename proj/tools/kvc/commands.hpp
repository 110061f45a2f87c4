#pragma once

#include <functional>

#include <CLI11.hpp>

namespace kvc::cli {

/// Work selected by the parsed command line; returns the process exit code.
using Action = std::function<int()>;

void add_generate(CLI::App& app, Action& action);
void add_export_random(CLI::App& app, Action& action);
void add_bench(CLI::App& app, Action& action);
void add_oracle(CLI::App& app, Action& action);

} // namespace kvc::cli
