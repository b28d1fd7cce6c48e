#include <doctest.h>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "ntkorders/experiments.hpp"
#include "ntkorders/fits.hpp"

using namespace ntkorders;
using nlohmann::json;

TEST_CASE("power-law and exponential fits") {
    Series cubic, geo, flat, noisy;
    std::mt19937_64 gen(4);
    std::normal_distribution<double> noise(0.0, 0.01);
    for (int l = 1; l <= 20; ++l) {
        cubic.emplace_back(l, 5.0 * l * l * l);
        geo.emplace_back(l, 2.0 * std::pow(1.25, l));
        flat.emplace_back(l, 3.0);
        noisy.emplace_back(l, l * (1.0 + noise(gen)));
    }
    const auto p = fit_power_law(cubic);
    CHECK(p.slope == doctest::Approx(3.0).epsilon(1e-9));
    CHECK(p.r_squared == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(fit_exponential(geo).slope == doctest::Approx(std::log(1.25)).epsilon(1e-9));
    CHECK(std::abs(fit_exponential(flat).slope) < 1e-9);
    CHECK(std::abs(fit_power_law(noisy).slope - 1.0) < 0.05);
    CHECK(select_growth_model(cubic) == GrowthModel::power_law);
    CHECK(select_growth_model(geo) == GrowthModel::exponential);
    CHECK(select_growth_model(flat) == GrowthModel::power_law);

    CHECK(fit_power_law(cubic, 18).n_points == 3);
    CHECK_THROWS_AS(fit_power_law(cubic, 19), std::invalid_argument);
    CHECK_THROWS_AS(fit_power_law({{1, 1.0}, {2, 0.0}, {3, 2.0}}), std::invalid_argument);
}

TEST_CASE("config validation") {
    CHECK_THROWS_AS(parse_config("{\"command\": \"tensor-compare\", \"depth\": 0, \"width\": 10, \"n_net\": 100}"),
                    ConfigError);
    CHECK_THROWS_AS(parse_config("{\"command\": \"tensors\", \"depth\": 3, \"bogus\": 1}"), ConfigError);
    CHECK_THROWS_AS(parse_config("{\"command\": \"tensors\", \"depth\": 3, \"width_list\": [8, 16, 32]}"), ConfigError);
    CHECK_THROWS_AS(parse_config("{\"depth\": 3}", "no-such-command"), ConfigError);
    CHECK_THROWS_AS(parse_config("{\"command\": \"mc-estimate\", \"depth\": 2, \"width\": 8, \"n_net\": 10, "
                                 "\"channel_pairs\": \"some\"}"),
                    ConfigError);
    CHECK(parse_config("{\"command\": \"mc-estimate\", \"depth\": 2, \"width\": 8, \"n_net\": 10, "
                       "\"channel_pairs\": \"all\"}")
              .pairs == ChannelPairs::all);
    CHECK_THROWS_AS(parse_config("{\"command\": \"fit\"}", "tensors"), ConfigError);
    CHECK_THROWS_AS(parse_config("not json"), ConfigError);
    CHECK_THROWS_AS(parse_config("{\"command\": \"mc-estimate\", \"depth\": 2, \"n_net\": 100}"), ConfigError);
    CHECK_THROWS_AS(parse_config("{\"command\": \"tensors\", \"depth\": 2, \"observables\": [\"P\"]}"), ConfigError);
    CHECK_THROWS_AS(parse_config("{\"command\": \"tensors\", \"depth\": 2, \"activation\": \"swish\"}"), ConfigError);

    const auto c = parse_config(
        "{\"command\": \"mc-estimate\", \"activation\": {\"kind\": \"leaky_relu\", \"alpha\": 0.1}, \"depth\": 3, "
        "\"width\": 16, \"n_net\": 1e3, \"cw\": \"critical\", \"input_indices\": [0, 1], \"input_scale\": 2}");
    CHECK(c.activation.kind == ActivationKind::leaky_relu);
    CHECK(c.n_net == 1000);
    CHECK(c.widths == std::vector<int>{16, 16, 16});
    CHECK(c.cw_list.front() == doctest::Approx(2.0 / 1.01));
    CHECK(c.inputs.size() == 2);
    CHECK(c.inputs.matrix()(0, 0) == doctest::Approx(-2 * 0.9895229339599609));
    CHECK(c.layers == std::vector<int>{1, 2, 3});
}

TEST_CASE("infinite-width experiment output") {
    const auto c = parse_config("{\"command\": \"infinite-width\", \"depth\": 30, \"cw\": 2, \"input_indices\": [0, 1]}");
    const auto r = run_experiment(c);
    CHECK(r.rows.size() == 2 * 30 * 4);
    const auto csv = format_csv(r.rows);
    CHECK(csv.rfind("observable,component,layer,width,cw,value,stderr,source\n", 0) == 0);
    CHECK(csv.find("K,0-1,1,inf,2,") != std::string::npos);
    const auto summary = json::parse(r.summary_json);
    CHECK(summary["pass"].get<bool>());
    for (const auto& f : summary["fits"]) {
        if (f["observable"] == "Theta") CHECK(f["power_law"]["slope"].get<double>() == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(f["selected"] == "power_law");
    }
    CHECK(format_csv(run_experiment(c).rows) == csv);
}

TEST_CASE("exponential rate away from relu criticality") {
    const auto c = parse_config("{\"command\": \"infinite-width\", \"depth\": 30, \"cw\": 2.5, \"input_indices\": [0]}");
    const auto summary = json::parse(run_experiment(c).summary_json);
    for (const auto& f : summary["fits"]) {
        CHECK(f["selected"] == "exponential");
        if (f["observable"] == "K") CHECK(f["exponential"]["slope"].get<double>() == doctest::Approx(std::log(1.25)).epsilon(1e-9));
        // Theta carries an extra factor l, so its fitted rate sits above log(1.25).
        if (f["observable"] == "Theta") CHECK(f["exponential"]["slope"].get<double>() > std::log(1.25) + 0.02);
    }
    CHECK(summary["checks"]["theta_closed_form"].get<bool>());
}

TEST_CASE("criticality sweep classifies growth") {
    const auto c = parse_config(
        "{\"command\": \"criticality-sweep\", \"depth\": 15, \"cw_list\": [1.5, 2.0, 2.5], \"ell_start\": 5,"
        " \"observables\": [\"K\", \"Theta\", \"V4\", \"A\"], \"input_indices\": [0, 1]}");
    const auto r = run_experiment(c);
    CHECK(r.passed);
}

TEST_CASE("scale-invariance check and fit commands") {
    const auto relu = run_experiment(parse_config("{\"command\": \"scale-invariance-check\", \"depth\": 30}"));
    CHECK(relu.passed);
    const auto gelu = run_experiment(
        parse_config("{\"command\": \"scale-invariance-check\", \"activation\": \"gelu\", \"cw\": 1.98305826}"));
    CHECK(gelu.passed);
    CHECK_FALSE(json::parse(gelu.summary_json)["no_on_diagonal_corrections"].get<bool>());

    const auto fit = run_experiment(parse_config("{\"command\": \"fit\", \"series\": {\"s\": [[1, 5], [2, 40], [3, 135]]}}"));
    CHECK(fit.rows.size() == 8);
    CHECK(fit.rows[0].value == doctest::Approx(3.0));
    CHECK_THROWS_AS(run_experiment(parse_config("{\"command\": \"fit\", \"series\": {\"s\": [[1, 5], [2, 40]]}}")),
                    ConfigError);
}

TEST_CASE("outputs are written and reproducible across worker counts") {
    const std::string cfg =
        "{\"command\": \"mc-estimate\", \"depth\": 3, \"width\": 12, \"n_net\": 300, \"n_stats\": 2, \"seed\": 11,"
        " \"observables\": [\"K\", \"Theta\", \"V4\", \"B\"], \"input_indices\": [0, 1]}";
    const auto c = parse_config(cfg);
    const auto r1 = run_experiment(c, 1);
    const auto r4 = run_experiment(c, 4);
    CHECK(format_csv(r1.rows) == format_csv(r4.rows));
    CHECK(r1.summary_json == r4.summary_json);

    const auto dir = std::filesystem::temp_directory_path() / "ntkorders_experiment_test";
    write_outputs(r1, dir.string());
    std::ifstream in(dir / "results.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "observable,component,layer,width,cw,value,stderr,source");
    CHECK(std::filesystem::exists(dir / "summary.json"));
    std::filesystem::remove_all(dir);
}

TEST_CASE("width sweep on a small relu network") {
    const auto c = parse_config(
        "{\"command\": \"width-sweep\", \"depth\": 3, \"cw\": 2, \"width_list\": [8, 16, 32], \"n_net\": 4000,"
        " \"input_indices\": [0, 1]}");
    const auto r = run_experiment(c, 2);
    const auto s = json::parse(r.summary_json);
    CHECK(s["checks"]["diagonal_consistent_with_zero"].get<bool>());
    CHECK(s["series"].size() == 8);
}
