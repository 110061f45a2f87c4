#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"
#include "kvc/errors.hpp"
#include "options.hpp"

int main(int argc, char** argv) {
    using namespace kvc::cli;

    CLI::App app{"KV-cache compression engine and analyses"};
    app.require_subcommand(1);
    Action action;
    add_generate(app, action);
    add_export_random(app, action);
    add_bench(app, action);
    add_oracle(app, action);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        return action();
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const kvc::IoError& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kExitIo;
    } catch (const kvc::FormatError& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kExitIo;
    } catch (const kvc::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    }
}
