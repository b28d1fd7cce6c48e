#include <CLI11.hpp>

#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "ntkorders/errors.hpp"
#include "ntkorders/experiments.hpp"

namespace {

int default_workers() {
    if (const char* env = std::getenv("NTKORDERS_WORKERS")) {
        try {
            const int w = std::stoi(env);
            if (w >= 1) return w;
        } catch (const std::exception&) {
        }
        std::cerr << "ignoring invalid NTKORDERS_WORKERS='" << env << "'\n";
    }
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Finite-width NTK statistics: theory recursions, Monte Carlo ensembles and fits"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out";
    int workers = default_workers();
    std::optional<std::uint64_t> seed;
    for (const auto& name : ntkorders::experiment_commands()) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", config_path, "JSON experiment config")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", out_dir, "Output directory for results.csv and summary.json");
        sub->add_option("--workers", workers, "Worker threads (default: NTKORDERS_WORKERS or 1)")
            ->check(CLI::PositiveNumber);
        sub->add_option("--seed", seed, "Override the config seed");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    const std::string command = app.get_subcommands().front()->get_name();

    try {
        auto config = ntkorders::load_config(config_path, command);
        if (seed) config.seed = *seed;
        const auto result = ntkorders::run_experiment(config, workers);
        ntkorders::write_outputs(result, out_dir);
        std::cout << command << ": " << result.rows.size() << " rows, checks " << (result.passed ? "passed" : "failed")
                  << ", written to " << out_dir << "\n";
        return 0;
    } catch (const ntkorders::ConfigError& e) {
        std::cerr << "invalid config: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid config: " << e.what() << "\n";
        return 2;
    } catch (const ntkorders::NumericalError& e) {
        std::cerr << "numerical failure in " << e.stage() << ": " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
