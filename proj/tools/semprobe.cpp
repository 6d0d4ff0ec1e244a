// Experiment driver: a thin argument-parsing shell over the library's
// command layer. Every behavior here is reachable through library calls.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "semprobe/experiment.hpp"

int main(int argc, char** argv) {
    CLI::App app{"semprobe: desk-scale dual-encoder episodic lab"};
    app.require_subcommand(0, 1);

    bool print_defaults = false;
    app.add_flag("--print-defaults", print_defaults,
                 "print the built-in config as JSON and exit");

    std::string run_config, run_out;
    std::optional<std::size_t> run_workers;
    std::optional<std::uint64_t> run_seed;
    CLI::App* run = app.add_subcommand(
        "run", "execute one configured run and write its artifacts");
    run->add_option("--config", run_config, "JSON config file")->required();
    run->add_option("--out", run_out, "output directory")->required();
    run->add_option("--workers", run_workers,
                    "episode fan-out threads (overrides config)");
    run->add_option("--seed", run_seed,
                    "replace the config seed list with this single seed");

    std::vector<std::string> cmp_dirs;
    std::string cmp_csv = "comparison.csv";
    CLI::App* cmp = app.add_subcommand(
        "compare", "tabulate finished runs, ordered by label");
    cmp->add_option("dirs", cmp_dirs, "run output directories")
        ->required()
        ->expected(-1);
    cmp->add_option("--csv", cmp_csv, "where to write the CSV table");

    std::string sw_config, sw_param, sw_values, sw_out;
    std::optional<std::size_t> sw_workers;
    CLI::App* sw = app.add_subcommand(
        "sweep", "re-run a config across values of one parameter");
    sw->add_option("--config", sw_config, "JSON config file")->required();
    sw->add_option("--param", sw_param,
                   "config field to vary (dotted for data.*)")
        ->required();
    sw->add_option("--values", sw_values, "comma-separated value list")
        ->required();
    sw->add_option("--out", sw_out, "output directory")->required();
    sw->add_option("--workers", sw_workers,
                   "episode fan-out threads (overrides config)");

    CLI11_PARSE(app, argc, argv);

    if (run->parsed()) {
        return semprobe::cmd_run(run_config, run_out, run_workers, run_seed,
                                 std::cout, std::cerr);
    }
    if (cmp->parsed()) {
        return semprobe::cmd_compare(cmp_dirs, cmp_csv, std::cout, std::cerr);
    }
    if (sw->parsed()) {
        return semprobe::cmd_sweep(sw_config, sw_param, sw_values, sw_out,
                                   sw_workers, std::cout, std::cerr);
    }
    if (print_defaults) {
        return semprobe::cmd_print_defaults(std::cout);
    }
    std::cerr << app.help();
    return 2;
}
