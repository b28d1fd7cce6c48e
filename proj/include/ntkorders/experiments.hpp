#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ntkorders/activation.hpp"
#include "ntkorders/fits.hpp"
#include "ntkorders/infinite_width.hpp"
#include "ntkorders/mc_ensemble.hpp"

namespace ntkorders {

// Invalid configuration; the CLI maps it to exit code 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

const std::vector<std::string>& experiment_commands();

struct ExperimentConfig {
    std::string command;
    ActivationModel activation;
    InputSet inputs;
    int depth = 0;
    std::vector<int> widths;  // n_1 .. n_depth, empty for theory-only commands
    std::vector<double> cw_list;
    std::int64_t n_net = 0;
    int n_stats = 1;
    std::vector<int> layers;
    std::vector<std::string> observables;
    std::vector<int> width_list;
    int ell_start = 1;
    std::uint64_t seed = 0;
    std::vector<double> k_grid;
    double theta = 1.0;
    bool dntk = false;
    ChannelMode channel = ChannelMode::trace_average;
    ChannelPairs pairs = ChannelPairs::distinct;
    // Observable name -> components to report or fit; missing names use the command default.
    std::map<std::string, std::vector<std::vector<int>>> components;
    std::vector<std::pair<std::string, Series>> series;
};

// Parses and validates a JSON document. Relative input files resolve against base_dir; the bundled
// reference inputs are used when none are given. `command` overrides or must match the document's tag.
ExperimentConfig parse_config(const std::string& json_text, const std::string& command = "",
                              const std::string& base_dir = ".");
ExperimentConfig load_config(const std::string& path, const std::string& command = "");

struct CsvRow {
    std::string observable;
    std::string component;
    std::string layer;
    std::string width;
    std::optional<double> cw;
    double value = 0.0;
    double stderr_ = 0.0;
    std::string source;
};

struct ExperimentResult {
    std::vector<CsvRow> rows;
    std::string summary_json;
    bool passed = true;
};

ExperimentResult run_experiment(const ExperimentConfig& config, int workers = 1);

std::string format_csv(const std::vector<CsvRow>& rows);
void write_outputs(const ExperimentResult& result, const std::string& out_dir);

std::string default_inputs_path();

}  // namespace ntkorders
