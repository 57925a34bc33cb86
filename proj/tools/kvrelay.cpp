// kvrelay: run budgeted KV relay simulations and print reference ratio tables.
//
//   kvrelay simulate [--config run.json] [--method NAME]... [--seed N]
//                    [--out DIR] [--emit-fixtures] [--jobs N] [-v]
//   kvrelay ratio-table
//
// Exit codes: 0 success, 2 config or I/O error, 3 numerical failure.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "kvrelay/error.hpp"
#include "kvrelay/simulate.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Budgeted KV-cache relay for multi-agent latent communication"};
    app.require_subcommand(1);

    auto* simulate = app.add_subcommand("simulate", "Relay synthetic or fixture episodes and write reports");
    std::string config_path;
    std::vector<std::string> methods;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    bool emit_fixtures = false;
    unsigned jobs = 0;
    int verbosity = 0;
    simulate->add_option("--config", config_path, "Run config document (JSON)");
    simulate->add_option("--method", methods, "Method to run; repeatable, replaces the config list")
        ->allow_extra_args(false);
    simulate->add_option("--seed", seed, "Chain seed");
    simulate->add_option("--out", out_dir, "Output directory");
    simulate->add_flag("--emit-fixtures", emit_fixtures, "Also write KV and attention fixtures per episode");
    simulate->add_option("--jobs", jobs, "Worker threads (0 = hardware concurrency)");
    simulate->add_flag("-v,--verbose", verbosity, "Include per-unit backfill traces in episode reports");

    auto* ratio = app.add_subcommand("ratio-table", "Print L and compression ratio for the reference benchmarks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    if (*ratio) {
        std::cout << kvrelay::ratio_table();
        return 0;
    }

    try {
        kvrelay::RunConfig config =
            config_path.empty() ? kvrelay::RunConfig{} : kvrelay::load_run_config(config_path);
        if (!methods.empty()) config.methods = methods;
        if (seed) config.chain.seed = *seed;
        if (!out_dir.empty()) config.output = out_dir;
        if (emit_fixtures) config.emit_fixtures = true;
        if (jobs != 0) config.jobs = jobs;
        if (verbosity > 0) config.verbosity = verbosity;

        const auto summary = kvrelay::run_simulation(config);
        std::cout << kvrelay::summary_to_csv(summary);
        return 0;
    } catch (const kvrelay::Error& e) {
        std::cerr << "kvrelay: " << e.what() << '\n';
        return e.code() == kvrelay::ErrorCode::NumericalFailure ? kExitNumerical : kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "kvrelay: " << e.what() << '\n';
        return kExitConfig;
    }
}
