#include "lol/runner.hpp"

#include "CLI11.hpp"

#include <iostream>

int main(int argc, char** argv) {
    CLI::App app{"Simulator for large-then-annealed vs small learning-rate training"};
    app.require_subcommand(1);

    std::string config;
    std::vector<std::string> sets;
    auto* run = app.add_subcommand("run", "Run every seed x algorithm of a config");
    run->add_option("config", config, "Config JSON")->required();
    run->add_option("--set", sets, "Override a field: dotted.path=value")->take_all();

    std::vector<std::string> dirs;
    std::string out;
    auto* compare = app.add_subcommand("compare", "Compare run directories");
    compare->add_option("dirs", dirs, "Output directories of lol run")->required();
    compare->add_option("--out", out, "Where to write comparison.json/.csv (default: first dir)");

    std::string axis;
    std::vector<std::string> values;
    auto* sweep = app.add_subcommand("sweep", "Run a config over several values of one field");
    sweep->add_option("config", config, "Config JSON")->required();
    sweep->add_option("--axis", axis, "Dotted path of a numeric field")->required();
    sweep->add_option("--values", values, "Comma-separated values")->required()->delimiter(',');
    sweep->add_option("--set", sets, "Override a field: dotted.path=value")->take_all();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : lol::kExitConfig;
    }

    if (*run) return lol::cli_run(config, sets);
    if (*compare) {
        std::vector<std::filesystem::path> paths(dirs.begin(), dirs.end());
        return lol::cli_compare(paths, out.empty() ? paths.front() : std::filesystem::path(out));
    }
    return lol::cli_sweep(config, axis, values, sets);
}
