#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ntkorders/experiments.hpp"
#include "ntkorders/finite_width.hpp"
#include "ntkorders/fits.hpp"
#include "ntkorders/gaussian_moments.hpp"
#include "ntkorders/infinite_width.hpp"

using namespace ntkorders;
using nlohmann::json;

namespace {

int g_workers = 1;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

ExperimentResult run(const json& cfg) { return run_experiment(parse_config(cfg.dump()), g_workers); }

Eigen::MatrixXd cov2(double k11, double k12, double k22) {
    Eigen::MatrixXd c(2, 2);
    c << k11, k12, k12, k22;
    return c;
}

Outcome moment_engine() {
    MomentOptions quad;
    quad.use_closed_forms = false;
    double worst = 0.0, worst_stein = 0.0;
    int checked = 0;
    for (const auto& act : {make_activation(ActivationKind::relu), make_activation(ActivationKind::leaky_relu, 0.1)}) {
        for (double k11 : {0.1, 0.4, 1.0, 3.0, 10.0})
            for (double k22 : {0.1, 1.0, 10.0})
                for (int r = 0; r <= 8; ++r) {
                    const double rho = -0.95 + 1.9 * r / 8.0;
                    const auto c = cov2(k11, rho * std::sqrt(k11 * k22), k22);
                    std::vector<MomentQuery> queries;
                    for (int o1 = 0; o1 <= 1; ++o1)
                        for (int o2 = 0; o2 <= 1; ++o2) queries.push_back({{{0, o1}, {1, o2}}, {}, {}});
                    for (int o = 0; o <= 1; ++o)
                        for (std::vector<int> w : {std::vector<int>{}, {0}, {0, 0}}) {
                            queries.push_back({{{0, o}}, {}, w});
                            queries.push_back({{{0, o}, {0, o}}, {}, w});
                        }
                    for (const auto& q : queries) {
                        const auto closed = scale_invariant_closed_form(act, q, c);
                        if (!closed) continue;
                        const double numeric = expect_product(act, q, c, quad);
                        worst = std::max(worst, std::abs(*closed - numeric) / std::max(1.0, std::abs(*closed)));
                        ++checked;
                    }
                    const double lhs = expect_product(act, {{{0, 0}, {1, 0}}, {}, {0}}, c);
                    const double rhs = c(0, 0) * expect_product(act, {{{0, 1}, {1, 0}}, {}, {}}, c) +
                                       c(0, 1) * expect_product(act, {{{0, 0}, {1, 1}}, {}, {}}, c);
                    worst_stein = std::max(worst_stein, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
                }
    }
    return {checked > 0 && worst < 1e-8 && worst_stein < 1e-8,
            std::to_string(checked) + " closed forms, max deviation " + fmt("%.2e", worst) + ", max Stein residual " +
                fmt("%.2e", worst_stein)};
}

Outcome relu_criticality() {
    const auto relu = make_activation(ActivationKind::relu);
    const InputSet x(std::vector<std::vector<double>>{{-0.9895229339599609, -0.5992491841316223}});
    const auto crit = run_kernels(x, relu, std::vector<double>(30, 2.0));
    double k_dev = 0.0, inc_dev = 0.0;
    Series theta;
    const double k1 = crit[0].K(0, 0);
    for (int l = 1; l <= 30; ++l) {
        k_dev = std::max(k_dev, std::abs(crit[l - 1].K(0, 0) - k1) / k1);
        theta.emplace_back(l, crit[l - 1].Theta(0, 0));
        if (l > 1) inc_dev = std::max(inc_dev, std::abs(crit[l - 1].Theta(0, 0) - crit[l - 2].Theta(0, 0) - k1) / k1);
    }
    const double exponent = fit_power_law(theta).slope;
    bool ok = k_dev < 1e-10 && std::abs(exponent - 1.0) < 0.01 && inc_dev < 1e-10;
    std::string detail = "K drift " + fmt("%.1e", k_dev) + ", Theta exponent " + fmt("%.6f", exponent) +
                         ", Theta increment vs K1 " + fmt("%.1e", inc_dev);
    for (double cw : {1.5, 2.5}) {
        const auto off = run_kernels(x, relu, std::vector<double>(30, cw));
        Series k, t;
        for (int l = 1; l <= 30; ++l) {
            k.emplace_back(l, off[l - 1].K(0, 0));
            t.emplace_back(l, off[l - 1].Theta(0, 0));
        }
        const bool models = select_growth_model(k) == GrowthModel::exponential &&
                            select_growth_model(t) == GrowthModel::exponential;
        const double rate = fit_exponential(k).slope;
        ok = ok && models && std::abs(rate - std::log(cw / 2.0)) < 1e-3;
        detail += "; C=" + fmt("%.1f", cw) + " exponential " + (models ? "wins" : "loses") + ", K rate " +
                  fmt("%.6f", rate) + " vs " + fmt("%.6f", std::log(cw / 2.0));
    }
    return {ok, detail};
}

Outcome width_sweeps(const std::vector<json>& configs) {
    bool ok = true;
    std::string detail;
    for (const auto& cfg : configs) {
        const auto r = run(cfg);
        const auto s = json::parse(r.summary_json);
        ok = ok && r.passed;
        std::ostringstream d;
        d << s["activation"].get<std::string>() << ":";
        for (const auto& series : s["series"]) {
            const bool diag = series["diagonal"].get<bool>();
            d << " " << series["observable"].get<std::string>() << "(" << series["component"].get<std::string>() << ")";
            if (series.contains("log_log")) d << " slope " << fmt("%.3f", series["log_log"]["slope"].get<double>());
            d << (diag ? " max|z| " : " ") << (diag ? fmt("%.2f", series["max_abs_z"].get<double>()) : "");
            if (diag && !s["scale_invariant"].get<bool>()) d << " z(n=8) " << fmt("%.1f", series["z"][0].get<double>());
            d << ";";
        }
        for (const auto& [name, v] : s["checks"].items()) d << " " << name << "=" << (v.get<bool>() ? "ok" : "no");
        detail += (detail.empty() ? "" : " | ") + d.str();
    }
    return {ok, detail};
}

Outcome no_diagonal_corrections() {
    std::vector<json> cfgs;
    for (const json act : {json("relu"), json{{"kind", "leaky_relu"}, {"alpha", 0.1}}})
        cfgs.push_back({{"command", "width-sweep"},
                        {"activation", act},
                        {"input_indices", {0, 1}},
                        {"depth", 4},
                        {"cw", 2.0},
                        {"width_list", {8, 16, 32, 64}},
                        {"n_net", 100000},
                        {"seed", 3}});
    return width_sweeps(cfgs);
}

Outcome gelu_corrections() {
    return width_sweeps({{{"command", "width-sweep"},
                          {"activation", "gelu"},
                          {"input_indices", {0, 1}},
                          {"input_scale", 0.53},
                          {"depth", 4},
                          {"cw", 1.98305826},
                          {"width_list", {8, 16, 32, 64}},
                          {"n_net", 100000},
                          {"seed", 4}}});
}

Outcome tensor_oracle() {
    const auto r = run({{"command", "tensor-compare"},
                        {"activation", "relu"},
                        {"depth", 5},
                        {"cw", 2.0},
                        {"width", 200},
                        {"layers", {2, 3, 4, 5}},
                        {"n_net", 10000},
                        {"n_stats", 10},
                        {"seed", 5}});
    const auto s = json::parse(r.summary_json);
    std::string detail = std::to_string(s["components"].get<long>()) + " components, within 3 stderr " +
                         fmt("%.4f", s["fraction_within_3"].get<double>()) + ", within 2 stderr " +
                         fmt("%.4f", s["fraction_within_2"].get<double>()) + ", max z " +
                         fmt("%.2f", s["max_z"].get<double>()) + " (stderr of the mean: within 3 " +
                         fmt("%.4f", s["stderr_of_mean"]["fraction_within_3"].get<double>()) + ")";
    std::map<std::string, std::string> by_name;
    for (const auto& cmp : s["comparisons"])
        by_name[cmp["observable"].get<std::string>()] +=
            " L" + std::to_string(cmp["layer"].get<int>()) + " " + std::to_string(cmp["within_3"].get<long>()) + "/" +
            std::to_string(cmp["components"].get<long>()) +
            fmt(" (diag rel %+.4f)", cmp["mean_diagonal_relative_deviation"].get<double>());
    detail += "; within 3 stderr by layer:";
    for (const auto& [name, text] : by_name) detail += " " + name + ":" + text + ";";
    return {r.passed, detail};
}

Outcome tensor_stability() {
    bool ok = true;
    std::ostringstream d;
    auto sweep = [&](const json& base, const std::string& label) {
        const auto r = run(base);
        const auto s = json::parse(r.summary_json);
        int fits = 0, passed = 0;
        double min_r2 = 1.0;
        for (const auto& f : s["fits"]) {
            ++fits;
            passed += f["pass"].get<bool>();
            if (f["expected"] == "power_law") min_r2 = std::min(min_r2, f["power_law"]["r_squared"].get<double>());
        }
        ok = ok && r.passed;
        d << label << ": " << passed << "/" << fits << " fits as expected, min critical r2 " << fmt("%.5f", min_r2)
          << "; ";
    };
    const json v4_inputs = {{"key", "reference_4d"}};
    json theory = {{"command", "criticality-sweep"}, {"activation", "relu"},  {"depth", 15},
                   {"cw_list", {1.5, 2.0, 2.5}},    {"ell_start", 5}};
    json t_ntk = theory, t_v4 = theory;
    t_ntk["observables"] = {"D", "F", "A", "B"};
    t_v4["observables"] = {"V4"};
    t_v4["inputs"] = v4_inputs;
    sweep(t_ntk, "theory D,F,A,B");
    sweep(t_v4, "theory V4");
    json m_ntk = t_ntk, m_v4 = t_v4;
    for (json* j : {&m_ntk, &m_v4}) {
        (*j)["width"] = 200;
        (*j)["n_net"] = 600;
        (*j)["n_stats"] = 10;
        (*j)["seed"] = 6;
    }
    sweep(m_ntk, "mc D,F,A,B");
    sweep(m_v4, "mc V4");
    return {ok, d.str()};
}

Outcome scale_invariance() {
    bool ok = true;
    std::ostringstream d;
    for (const json act : {json("relu"), json{{"kind", "leaky_relu"}, {"alpha", 0.1}}}) {
        const auto r = run({{"command", "scale-invariance-check"}, {"activation", act}, {"k_grid", {0.5, 1, 3}},
                            {"depth", 30}});
        const auto s = json::parse(r.summary_json);
        double worst = 0.0;
        for (const auto& g : s["grid"])
            worst = std::max({worst, std::abs(g["eq11_residual"].get<double>()), std::abs(g["eq9_residual"].get<double>())});
        ok = ok && r.passed && worst < 1e-6;
        d << s["activation"].get<std::string>() << " max residual " << fmt("%.1e", worst) << ", diagonal K1/Theta1 "
          << fmt("%.1e", s["max_relative_diagonal_correction"].get<double>()) << "; ";
    }
    const auto g = run({{"command", "scale-invariance-check"}, {"activation", "gelu"}, {"k_grid", {1.0}}});
    const double eq9 = std::abs(json::parse(g.summary_json)["grid"][0]["eq9_residual"].get<double>());
    ok = ok && eq9 > 1e-3;
    d << "gelu eq9 residual at K=1 " << fmt("%.4f", eq9);
    return {ok, d.str()};
}

Outcome multipliers() {
    const auto relu = make_activation(ActivationKind::relu);
    const InputSet x(std::vector<std::vector<double>>{{-0.9895229339599609, -0.5992491841316223}});
    const auto run_t = run_theory(x, relu, std::vector<double>(6, 2.0));
    double worst = 0.0;
    for (int l = 1; l <= 5; ++l)
        for (auto kind : {TensorKind::F, TensorKind::D, TensorKind::A, TensorKind::B})
            worst = std::max(worst, std::abs(perturbation_multiplier(run_t.tensors[l - 1], run_t.kernels[l - 1], relu,
                                                                     2.0, kind) - 1.0));
    return {worst < 1e-6, "max |multiplier - 1| over F, D, A, B and layers 1-5: " + fmt("%.1e", worst)};
}

Outcome determinism() {
    const std::vector<json> cfgs = {
        {{"command", "mc-estimate"}, {"depth", 4}, {"width", 24}, {"n_net", 700}, {"n_stats", 3}, {"seed", 9},
         {"observables", {"K", "Theta", "V4", "D", "F", "A", "B"}}},
        {{"command", "width-sweep"}, {"activation", "gelu"}, {"depth", 3}, {"cw", 1.9}, {"width_list", {8, 16, 32}},
         {"n_net", 2000}, {"input_indices", {0, 1}}, {"seed", 10}},
        {{"command", "criticality-sweep"}, {"depth", 6}, {"cw_list", {1.5, 2.0}}, {"width", 16}, {"n_net", 300},
         {"ell_start", 2}, {"observables", {"K", "A"}}, {"seed", 12}}};
    bool ok = true;
    std::size_t rows = 0;
    for (const auto& cfg : cfgs) {
        const auto c = parse_config(cfg.dump());
        const auto a = run_experiment(c, 1), b = run_experiment(c, 8);
        ok = ok && format_csv(a.rows) == format_csv(b.rows) && a.summary_json == b.summary_json;
        rows += a.rows.size();
    }
    return {ok, std::to_string(cfgs.size()) + " experiments, " + std::to_string(rows) +
                    " CSV rows compared at 1 and 8 workers"};
}

}  // namespace

int main(int argc, char** argv) {
    if (const char* env = std::getenv("NTKORDERS_WORKERS")) g_workers = std::max(1, std::atoi(env));
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"moment engine correctness", moment_engine},
        {"relu criticality", relu_criticality},
        {"no diagonal corrections for scale-invariant activations", no_diagonal_corrections},
        {"gelu corrections present", gelu_corrections},
        {"theory vs Monte Carlo tensors", tensor_oracle},
        {"tensor stability at criticality", tensor_stability},
        {"scale-invariance identities", scale_invariance},
        {"perturbation multipliers", multipliers},
        {"determinism across worker counts", determinism},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!selected.empty() && !selected.count(id)) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("criterion %d [%s]: %s (%.1f s) %s\n", id, criteria[i].first.c_str(), o.pass ? "PASS" : "FAIL", secs,
                    o.detail.c_str());
        std::fflush(stdout);
        failures += !o.pass;
    }
    return failures == 0 ? 0 : 1;
}
