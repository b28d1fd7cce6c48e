#include "ntkorders/experiments.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "ntkorders/errors.hpp"
#include "ntkorders/finite_width.hpp"

#ifndef NTKORDERS_DATA_DIR
#define NTKORDERS_DATA_DIR "data"
#endif

namespace ntkorders {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kInputKeys = {"activation", "inputs", "input_indices", "input_scale"};

const std::map<std::string, std::vector<std::string>>& command_keys() {
    static const std::map<std::string, std::vector<std::string>> keys = {
        {"infinite-width", {"depth", "cw", "layers", "observables", "ell_start"}},
        {"tensors", {"depth", "cw", "layers", "observables", "hidden_widths", "dntk", "components"}},
        {"mc-estimate",
         {"depth", "cw", "width", "hidden_widths", "n_net", "n_stats", "layers", "observables", "seed", "channel",
          "channel_pairs", "components"}},
        {"tensor-compare",
         {"depth", "cw", "width", "hidden_widths", "n_net", "n_stats", "layers", "observables", "seed",
          "channel_pairs"}},
        {"criticality-sweep",
         {"depth", "cw_list", "observables", "components", "ell_start", "width", "n_net", "n_stats", "seed",
          "channel", "channel_pairs"}},
        {"width-sweep",
         {"depth", "cw", "width_list", "n_net", "n_stats", "seed", "channel", "channel_pairs", "observables", "layers"}},
        {"scale-invariance-check", {"k_grid", "cw", "theta", "depth"}},
        {"fit", {"series", "ell_start"}},
    };
    return keys;
}

const std::vector<std::string> kKernelNames = {"K", "Theta"};
const std::vector<std::string> kLeadingNames = {"V4", "D", "F", "A", "B"};
const std::vector<std::string> kTheoryTensorNames = {"V4", "D", "F", "A", "B", "K1", "Theta1",
                                                     "P",  "Q", "R", "S", "T", "U"};

bool is_rank2(const std::string& name) { return name == "K" || name == "Theta" || name == "K1" || name == "Theta1"; }

[[noreturn]] void fail(const std::string& what) { throw ConfigError(what); }

double get_number(const json& v, const std::string& key) {
    if (!v.is_number()) fail("'" + key + "' must be a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) fail("'" + key + "' must be finite");
    return x;
}

std::int64_t get_integer(const json& v, const std::string& key) {
    const double x = get_number(v, key);
    if (x != std::floor(x) || std::fabs(x) > 9.0e15) fail("'" + key + "' must be an integer");
    return static_cast<std::int64_t>(x);
}

std::vector<int> get_int_list(const json& v, const std::string& key) {
    if (!v.is_array()) fail("'" + key + "' must be a list of integers");
    std::vector<int> out;
    for (const auto& e : v) out.push_back(static_cast<int>(get_integer(e, key)));
    return out;
}

std::vector<double> get_number_list(const json& v, const std::string& key) {
    if (!v.is_array() || v.empty()) fail("'" + key + "' must be a non-empty list of numbers");
    std::vector<double> out;
    for (const auto& e : v) out.push_back(get_number(e, key));
    return out;
}

std::vector<std::vector<double>> get_matrix(const json& v, const std::string& what) {
    if (!v.is_array() || v.empty()) fail(what + " must be a non-empty list of vectors");
    std::vector<std::vector<double>> rows;
    for (const auto& r : v) {
        if (!r.is_array() || r.empty()) fail(what + " must be a non-empty list of vectors");
        std::vector<double> row;
        for (const auto& x : r) row.push_back(get_number(x, what));
        if (!rows.empty() && row.size() != rows.front().size()) fail(what + ": vectors differ in dimension");
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot read '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::vector<double>> load_input_file(const std::string& path, const std::string& key) {
    json doc;
    try {
        doc = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        fail("input file '" + path + "': " + e.what());
    }
    if (!doc.is_object() || !doc.contains(key)) fail("input file '" + path + "' has no key '" + key + "'");
    return get_matrix(doc.at(key), "inputs");
}

ActivationModel parse_activation(const json& v) {
    try {
        if (v.is_string()) return make_activation(v.get<std::string>());
        if (v.is_object()) {
            std::optional<double> alpha;
            for (const auto& [k, x] : v.items())
                if (k != "kind" && k != "alpha") fail("unknown key 'activation." + k + "'");
            if (!v.contains("kind") || !v.at("kind").is_string()) fail("'activation.kind' must be a string");
            if (v.contains("alpha")) alpha = get_number(v.at("alpha"), "activation.alpha");
            return make_activation(v.at("kind").get<std::string>(), alpha);
        }
    } catch (const std::invalid_argument& e) {
        fail(std::string("activation: ") + e.what());
    }
    fail("'activation' must be a name or {kind, alpha}");
}

InputSet parse_inputs(const json& doc, const std::string& base_dir) {
    std::vector<std::vector<double>> rows;
    if (!doc.contains("inputs")) {
        rows = load_input_file(default_inputs_path(), "reference_2d");
    } else {
        const json& v = doc.at("inputs");
        if (v.is_array()) {
            rows = get_matrix(v, "inputs");
        } else if (v.is_object()) {
            for (const auto& [k, x] : v.items())
                if (k != "file" && k != "key") fail("unknown key 'inputs." + k + "'");
            std::string file = default_inputs_path();
            if (v.contains("file")) {
                if (!v.at("file").is_string()) fail("'inputs.file' must be a path");
                fs::path p(v.at("file").get<std::string>());
                file = p.is_absolute() ? p.string() : (fs::path(base_dir) / p).string();
            }
            if (!v.contains("key") || !v.at("key").is_string()) fail("'inputs.key' must be a string");
            rows = load_input_file(file, v.at("key").get<std::string>());
        } else {
            fail("'inputs' must be a list of vectors or {file, key}");
        }
    }
    if (doc.contains("input_indices")) {
        const auto idx = get_int_list(doc.at("input_indices"), "input_indices");
        if (idx.empty()) fail("'input_indices' must not be empty");
        std::vector<std::vector<double>> picked;
        for (int i : idx) {
            if (i < 0 || i >= static_cast<int>(rows.size())) fail("'input_indices' out of range");
            picked.push_back(rows[i]);
        }
        rows = std::move(picked);
    }
    InputSet inputs(rows);
    if (doc.contains("input_scale")) {
        const double s = get_number(doc.at("input_scale"), "input_scale");
        if (!(s > 0.0)) fail("'input_scale' must be positive");
        inputs = inputs.scaled(s);
    }
    return inputs;
}

double parse_cw(const json& v, const ActivationModel& act, const InputSet& inputs) {
    if (v.is_string()) {
        if (v.get<std::string>() != "critical") fail("'cw' must be a number or \"critical\"");
        return critical_cw(act, inputs);
    }
    const double cw = get_number(v, "cw");
    if (!(cw > 0.0)) fail("'cw' must be positive");
    return cw;
}

std::vector<std::string> parse_observables(const json& v, const std::vector<std::string>& allowed) {
    if (!v.is_array() || v.empty()) fail("'observables' must be a non-empty list");
    std::vector<std::string> out;
    for (const auto& e : v) {
        if (!e.is_string()) fail("'observables' entries must be names");
        const auto name = e.get<std::string>();
        if (std::find(allowed.begin(), allowed.end(), name) == allowed.end())
            fail("observable '" + name + "' is not available for this command");
        if (std::find(out.begin(), out.end(), name) != out.end()) fail("observable '" + name + "' listed twice");
        out.push_back(name);
    }
    return out;
}

const std::vector<std::string>& allowed_observables(const std::string& command) {
    static const std::vector<std::string> kernels = kKernelNames;
    static const std::vector<std::string> leading = kLeadingNames;
    static const std::vector<std::string> theory = kTheoryTensorNames;
    static const std::vector<std::string> all = {"K", "Theta", "V4", "D", "F", "A", "B"};
    if (command == "infinite-width" || command == "width-sweep") return kernels;
    if (command == "tensors") return theory;
    if (command == "tensor-compare") return leading;
    return all;
}

std::vector<std::string> default_observables(const std::string& command) {
    if (command == "tensors" || command == "tensor-compare") return kLeadingNames;
    if (command == "criticality-sweep") return {"K", "Theta"};
    return kKernelNames;
}

std::string fmt17(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string component_name(const std::vector<int>& c) {
    std::string s;
    for (std::size_t i = 0; i < c.size(); ++i) s += (i ? "-" : "") + std::to_string(c[i]);
    return s;
}

std::vector<std::vector<int>> all_components(int m, int rank) {
    std::vector<std::vector<int>> out;
    const int total = rank == 2 ? m * m : m * m * m * m;
    for (int idx = 0; idx < total; ++idx) {
        std::vector<int> c(rank);
        int r = idx;
        for (int k = rank - 1; k >= 0; --k) {
            c[k] = r % m;
            r /= m;
        }
        out.push_back(c);
    }
    return out;
}

std::vector<std::vector<int>> diagonal_components(int m, int rank) {
    std::vector<std::vector<int>> out;
    for (int a = 0; a < m; ++a) out.emplace_back(rank, a);
    return out;
}

std::vector<std::vector<int>> components_for(const ExperimentConfig& c, const std::string& name, bool diagonal) {
    const int rank = is_rank2(name) ? 2 : 4;
    auto it = c.components.find(name);
    if (it != c.components.end()) return it->second;
    return diagonal ? diagonal_components(c.inputs.size(), rank) : all_components(c.inputs.size(), rank);
}

void check_layers(const std::vector<int>& layers, int depth) {
    for (int l : layers)
        if (l < 1 || l > depth) fail("layer " + std::to_string(l) + " outside 1.." + std::to_string(depth));
}

std::vector<int> layer_range(int first, int last) {
    std::vector<int> out;
    for (int l = first; l <= last; ++l) out.push_back(l);
    return out;
}

}  // namespace

const std::vector<std::string>& experiment_commands() {
    static const std::vector<std::string> names = {"infinite-width",    "tensors",     "mc-estimate",
                                                   "tensor-compare",    "criticality-sweep", "width-sweep",
                                                   "scale-invariance-check", "fit"};
    return names;
}

std::string default_inputs_path() { return std::string(NTKORDERS_DATA_DIR) + "/reference_inputs.json"; }

ExperimentConfig parse_config(const std::string& json_text, const std::string& command, const std::string& base_dir) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        fail(std::string("config is not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) fail("config must be a JSON object");

    ExperimentConfig c;
    if (doc.contains("command")) {
        if (!doc.at("command").is_string()) fail("'command' must be a string");
        c.command = doc.at("command").get<std::string>();
        if (!command.empty() && command != c.command)
            fail("config command '" + c.command + "' does not match subcommand '" + command + "'");
    } else {
        c.command = command;
    }
    const auto& keys = command_keys();
    auto spec = keys.find(c.command);
    if (spec == keys.end()) fail("unknown command '" + c.command + "'");

    std::set<std::string> allowed(spec->second.begin(), spec->second.end());
    allowed.insert("command");
    if (c.command != "fit") allowed.insert(kInputKeys.begin(), kInputKeys.end());
    for (const auto& [k, v] : doc.items())
        if (!allowed.count(k)) fail("key '" + k + "' is not valid for command '" + c.command + "'");

    if (c.command == "fit") {
        if (!doc.contains("series") || !doc.at("series").is_object() || doc.at("series").empty())
            fail("'series' must map names to lists of [layer, value] pairs");
        for (const auto& [name, pts] : doc.at("series").items()) {
            if (!pts.is_array()) fail("series '" + name + "' must be a list of pairs");
            Series s;
            for (const auto& p : pts) {
                if (!p.is_array() || p.size() != 2) fail("series '" + name + "' must hold [layer, value] pairs");
                s.emplace_back(get_number(p[0], "series"), get_number(p[1], "series"));
            }
            c.series.emplace_back(name, std::move(s));
        }
        if (doc.contains("ell_start")) c.ell_start = static_cast<int>(get_integer(doc.at("ell_start"), "ell_start"));
        return c;
    }

    c.activation = parse_activation(doc.contains("activation") ? doc.at("activation") : json("relu"));
    c.inputs = parse_inputs(doc, base_dir);
    const int m = c.inputs.size();

    const bool needs_depth = c.command != "scale-invariance-check";
    if (doc.contains("depth")) {
        c.depth = static_cast<int>(get_integer(doc.at("depth"), "depth"));
        if (c.depth < 1) fail("'depth' must be at least 1");
    } else if (needs_depth) {
        fail("'depth' is required");
    }

    if (c.command == "criticality-sweep") {
        if (!doc.contains("cw_list")) fail("'cw_list' is required");
        c.cw_list = get_number_list(doc.at("cw_list"), "cw_list");
        for (double cw : c.cw_list)
            if (!(cw > 0.0)) fail("'cw_list' entries must be positive");
    } else if (allowed.count("cw")) {
        c.cw_list = {doc.contains("cw") ? parse_cw(doc.at("cw"), c.activation, c.inputs)
                                        : critical_cw(c.activation, c.inputs)};
    }

    if (doc.contains("layers")) {
        c.layers = get_int_list(doc.at("layers"), "layers");
        if (c.layers.empty()) fail("'layers' must not be empty");
        check_layers(c.layers, c.depth);
    } else if (c.depth > 0) {
        c.layers = c.command == "width-sweep" ? std::vector<int>{c.depth} : layer_range(1, c.depth);
    }

    c.observables = doc.contains("observables") ? parse_observables(doc.at("observables"), allowed_observables(c.command))
                                                : default_observables(c.command);

    if (doc.contains("hidden_widths")) {
        if (doc.contains("width")) fail("give either 'width' or 'hidden_widths'");
        c.widths = get_int_list(doc.at("hidden_widths"), "hidden_widths");
        if (static_cast<int>(c.widths.size()) != c.depth) fail("'hidden_widths' must list n_1 .. n_depth");
    } else if (doc.contains("width")) {
        c.widths.assign(c.depth, static_cast<int>(get_integer(doc.at("width"), "width")));
    }
    for (int w : c.widths)
        if (w < 2) fail("widths must be at least 2");

    if (doc.contains("n_net")) {
        c.n_net = get_integer(doc.at("n_net"), "n_net");
        if (c.n_net < 2) fail("'n_net' must be at least 2");
    }
    if (doc.contains("n_stats")) {
        c.n_stats = static_cast<int>(get_integer(doc.at("n_stats"), "n_stats"));
        if (c.n_stats < 1) fail("'n_stats' must be at least 1");
    }
    const bool mc_required = c.command == "mc-estimate" || c.command == "tensor-compare" || c.command == "width-sweep";
    if (mc_required && c.n_net == 0) fail("'n_net' is required");
    if ((c.command == "mc-estimate" || c.command == "tensor-compare") && c.widths.empty())
        fail("'width' or 'hidden_widths' is required");
    if (c.command == "criticality-sweep" && (c.n_net > 0) != !c.widths.empty())
        fail("Monte Carlo sweeps need both 'n_net' and 'width'");
    if (c.command == "criticality-sweep" && doc.contains("n_stats") && c.n_net == 0)
        fail("'n_stats' needs 'n_net'");

    if (doc.contains("seed")) {
        const json& s = doc.at("seed");
        if (s.is_number_unsigned())
            c.seed = s.get<std::uint64_t>();
        else if (s.is_number_integer() && s.get<std::int64_t>() >= 0)
            c.seed = static_cast<std::uint64_t>(s.get<std::int64_t>());
        else
            fail("'seed' must be a non-negative integer");
    }
    if (doc.contains("channel")) {
        const auto& ch = doc.at("channel");
        if (ch == "trace_average")
            c.channel = ChannelMode::trace_average;
        else if (ch == "fixed_channel")
            c.channel = ChannelMode::fixed_channel;
        else
            fail("'channel' must be \"trace_average\" or \"fixed_channel\"");
    }
    if (doc.contains("channel_pairs")) {
        const auto& cp = doc.at("channel_pairs");
        if (cp == "distinct")
            c.pairs = ChannelPairs::distinct;
        else if (cp == "all")
            c.pairs = ChannelPairs::all;
        else
            fail("'channel_pairs' must be \"distinct\" or \"all\"");
    }
    if (doc.contains("dntk")) {
        if (!doc.at("dntk").is_boolean()) fail("'dntk' must be a boolean");
        c.dntk = doc.at("dntk").get<bool>();
    }
    if (c.command == "tensors" && !c.dntk)
        for (const auto& o : c.observables)
            if (o == "P" || o == "Q" || o == "R" || o == "S" || o == "T" || o == "U")
                fail("observable '" + o + "' needs \"dntk\": true");

    if (c.command == "width-sweep") {
        if (!doc.contains("width_list")) fail("'width_list' is required");
        c.width_list = get_int_list(doc.at("width_list"), "width_list");
        if (c.width_list.size() < 3) fail("'width_list' needs at least three widths");
        for (int w : c.width_list)
            if (w < 2) fail("widths must be at least 2");
    }
    if (doc.contains("ell_start")) c.ell_start = static_cast<int>(get_integer(doc.at("ell_start"), "ell_start"));

    if (c.command == "scale-invariance-check") {
        c.k_grid = doc.contains("k_grid") ? get_number_list(doc.at("k_grid"), "k_grid") : std::vector<double>{0.5, 1, 3};
        for (double k : c.k_grid)
            if (!(k > 0.0)) fail("'k_grid' entries must be positive");
        if (doc.contains("theta")) c.theta = get_number(doc.at("theta"), "theta");
    }

    if (doc.contains("components")) {
        const json& v = doc.at("components");
        if (!v.is_object()) fail("'components' must map observable names to index lists");
        for (const auto& [name, list] : v.items()) {
            if (std::find(c.observables.begin(), c.observables.end(), name) == c.observables.end())
                fail("'components' names observable '" + name + "' that is not requested");
            if (!list.is_array() || list.empty()) fail("'components." + name + "' must be a non-empty list");
            const std::size_t rank = is_rank2(name) ? 2 : 4;
            auto& dst = c.components[name];
            for (const auto& comp : list) {
                const auto idx = get_int_list(comp, "components");
                if (idx.size() != rank) fail("'components." + name + "' entries need " + std::to_string(rank) + " indices");
                for (int i : idx)
                    if (i < 0 || i >= m) fail("'components." + name + "' index out of range");
                dst.push_back(idx);
            }
        }
    }
    return c;
}

ExperimentConfig load_config(const std::string& path, const std::string& command) {
    const auto base = fs::path(path).parent_path();
    return parse_config(read_file(path), command, base.empty() ? "." : base.string());
}

namespace {

struct Context {
    const ExperimentConfig& config;
    int workers;
    ExperimentResult result;
    json summary = json::object();
    bool passed = true;

    void row(const std::string& obs, const std::vector<int>& comp, const std::string& layer, const std::string& width,
             std::optional<double> cw, double value, double err, const std::string& source) {
        result.rows.push_back({obs, component_name(comp), layer, width, cw, value, err, source});
    }
    void check(const std::string& name, bool ok) {
        summary["checks"][name] = ok;
        passed = passed && ok;
    }
};

json fit_json(const FitResult& f) {
    return {{"slope", f.slope},
            {"intercept", f.intercept},
            {"r_squared", f.r_squared},
            {"residual_norm", f.residual_norm},
            {"n_points", f.n_points}};
}

// Both fits plus the selected model; throws ConfigError when the series is too short.
json fit_both(const Series& s, double ell_start) {
    try {
        json j;
        j["power_law"] = fit_json(fit_power_law(s, ell_start));
        j["exponential"] = fit_json(fit_exponential(s, ell_start));
        j["selected"] = growth_model_name(select_growth_model(s, ell_start));
        return j;
    } catch (const std::invalid_argument& e) {
        fail(std::string("fit: ") + e.what());
    }
}

double theory_value(const TheoryRun& run, const std::string& name, int layer, const std::vector<int>& c) {
    const auto& k = run.kernels[layer - 1];
    const auto& t = run.tensors[layer - 1];
    if (name == "K") return k.K(c[0], c[1]);
    if (name == "Theta") return k.Theta(c[0], c[1]);
    if (name == "K1") return t.K1(c[0], c[1]);
    if (name == "Theta1") return t.Theta1(c[0], c[1]);
    return tensor_of(t, tensor_kind_from_name(name))(c[0], c[1], c[2], c[3]);
}

NetworkSpec network_spec(const ExperimentConfig& c, const std::vector<int>& widths, double cw) {
    NetworkSpec s;
    s.widths.push_back(c.inputs.dimension());
    s.widths.insert(s.widths.end(), widths.begin(), widths.end());
    s.activation = c.activation;
    s.cw_schedule.assign(c.depth, cw);
    s.base_seed = c.seed;
    return s;
}

std::vector<int> theory_widths(const std::vector<int>& widths) {
    if (widths.empty()) return {};
    return std::vector<int>(widths.begin(), widths.end() - 1);
}

const EnsembleEstimate& estimate_at(const ObservableEstimate& e, const std::vector<int>& c) {
    return c.size() == 2 ? e.at(c[0], c[1]) : e.at(c[0], c[1], c[2], c[3]);
}

std::vector<ObservableEstimate> run_mc(Context& ctx, const NetworkSpec& spec, const std::vector<std::string>& names,
                                       const std::vector<int>& layers) {
    std::vector<Observable> obs;
    for (int l : layers)
        for (const auto& n : names) obs.push_back({observable_kind_from_name(n), l});
    EnsembleOptions opts;
    opts.n_net = ctx.config.n_net;
    opts.n_stats = ctx.config.n_stats;
    opts.workers = ctx.workers;
    opts.channel = ctx.config.channel;
    opts.pairs = ctx.config.pairs;
    ctx.summary["channel_pairs"] = opts.pairs == ChannelPairs::distinct ? "distinct" : "all";
    return run_ensemble(spec, ctx.config.inputs, obs, opts);
}

void cmd_infinite_width(Context& ctx) {
    const auto& c = ctx.config;
    const double cw = c.cw_list.front();
    const auto run = run_theory(c.inputs, c.activation, std::vector<double>(c.depth, cw));
    for (const auto& name : c.observables)
        for (int l : c.layers)
            for (const auto& comp : all_components(c.inputs.size(), 2))
                ctx.row(name, comp, std::to_string(l), "inf", cw, theory_value(run, name, l, comp), 0.0, "theory");

    const auto cp = critical_point(c.activation);
    ctx.summary["critical_point"] = {{"cw", cp.cw}, {"kernel", cp.kernel}};
    ctx.summary["cw"] = cw;
    json fits = json::array();
    if (c.depth - c.ell_start + 1 >= 3) {
        for (const auto& name : c.observables)
            for (const auto& comp : diagonal_components(c.inputs.size(), 2)) {
                Series s;
                for (int l = 1; l <= c.depth; ++l) s.emplace_back(l, theory_value(run, name, l, comp));
                json f = fit_both(s, c.ell_start);
                f["observable"] = name;
                f["component"] = component_name(comp);
                fits.push_back(f);
            }
    }
    ctx.summary["fits"] = fits;
    // Scale-invariant kinds: Theta^(l)(x,x) = l chi^(l-1) K^(1)(x,x) with chi = C_W / C_W^c.
    if (c.activation.scale_invariant) {
        const double chi = cw / cp.cw;
        double worst = 0.0;
        for (int a = 0; a < c.inputs.size(); ++a) {
            const double k1 = run.kernels[0].K(a, a);
            for (int l = 1; l <= c.depth; ++l) {
                const double expect = l * std::pow(chi, l - 1) * k1;
                worst = std::max(worst, std::fabs(run.kernels[l - 1].Theta(a, a) - expect) / std::fabs(expect));
            }
        }
        ctx.summary["theta_closed_form_deviation"] = worst;
        ctx.check("theta_closed_form", worst < 1e-10);
    }
}

void cmd_tensors(Context& ctx) {
    const auto& c = ctx.config;
    const double cw = c.cw_list.front();
    const auto run = run_theory(c.inputs, c.activation, std::vector<double>(c.depth, cw), c.dntk, theory_widths(c.widths));
    for (const auto& name : c.observables)
        for (int l : c.layers)
            for (const auto& comp : components_for(c, name, false))
                ctx.row(name, comp, std::to_string(l), "inf", cw, theory_value(run, name, l, comp), 0.0, "theory");
    double worst = 0.0;
    for (const auto& t : run.tensors) worst = std::max(worst, symmetry_violation(t));
    ctx.summary["symmetry_violation"] = worst;
    ctx.check("symmetric", worst < 1e-6);
    if (c.depth >= 2) {
        json mult;
        const int l = c.depth - 1;
        for (auto kind : {TensorKind::V4, TensorKind::D, TensorKind::F, TensorKind::A, TensorKind::B})
            mult[tensor_name(kind)] =
                perturbation_multiplier(run.tensors[l - 1], run.kernels[l - 1], c.activation, cw, kind);
        ctx.summary["perturbation_multipliers"] = mult;
        ctx.summary["perturbation_step"] = l;
    }
}

void cmd_mc_estimate(Context& ctx) {
    const auto& c = ctx.config;
    const double cw = c.cw_list.front();
    const auto spec = network_spec(c, c.widths, cw);
    const auto est = run_mc(ctx, spec, c.observables, c.layers);
    std::size_t i = 0;
    for (int l : c.layers)
        for (const auto& name : c.observables) {
            const auto& e = est[i++];
            for (const auto& comp : components_for(c, name, false)) {
                const auto& v = estimate_at(e, comp);
                ctx.row(name, comp, std::to_string(l), std::to_string(spec.widths[l]), cw, v.mean, v.standard_error,
                        "mc");
            }
        }
    ctx.summary["n_net"] = c.n_net;
    ctx.summary["n_stats"] = c.n_stats;
}

void cmd_tensor_compare(Context& ctx) {
    const auto& c = ctx.config;
    const double cw = c.cw_list.front();
    const auto spec = network_spec(c, c.widths, cw);
    const auto run = run_theory(c.inputs, c.activation, std::vector<double>(c.depth, cw), false, theory_widths(c.widths));
    const auto est = run_mc(ctx, spec, c.observables, c.layers);
    const double root = std::sqrt(static_cast<double>(c.n_stats));
    long total = 0, within2 = 0, within3 = 0, strict2 = 0, strict3 = 0;
    double max_z = 0.0;
    json per = json::array();
    std::size_t i = 0;
    for (int l : c.layers)
        for (const auto& name : c.observables) {
            const auto& e = est[i++];
            long n = 0, w2 = 0, w3 = 0;
            double mz = 0.0, rel = 0.0;
            int diagonals = 0;
            for (const auto& comp : all_components(c.inputs.size(), 4)) {
                const double th = theory_value(run, name, l, comp);
                const auto& v = estimate_at(e, comp);
                const std::string layer = std::to_string(l);
                ctx.row(name, comp, layer, "inf", cw, th, 0.0, "theory");
                ctx.row(name, comp, layer, std::to_string(spec.widths[l]), cw, v.mean, v.standard_error, "mc");
                const double diff = std::fabs(v.mean - th);
                const double z = diff == 0.0 ? 0.0 : diff / v.standard_error;
                const double zs = c.n_stats >= 2 ? z * root : z;
                ++n;
                w2 += z <= 2.0;
                w3 += z <= 3.0;
                strict2 += zs <= 2.0;
                strict3 += zs <= 3.0;
                mz = std::max(mz, std::isnan(z) ? std::numeric_limits<double>::infinity() : z);
                if (comp[0] == comp[1] && comp[0] == comp[2] && comp[0] == comp[3] && th != 0.0) {
                    rel += (v.mean - th) / std::fabs(th);
                    ++diagonals;
                }
            }
            per.push_back({{"observable", name}, {"layer", l}, {"components", n}, {"within_2", w2}, {"within_3", w3},
                           {"max_z", mz}, {"mean_diagonal_relative_deviation", diagonals ? rel / diagonals : 0.0}});
            total += n;
            within2 += w2;
            within3 += w3;
            max_z = std::max(max_z, mz);
        }
    ctx.summary["comparisons"] = per;
    ctx.summary["components"] = total;
    ctx.summary["fraction_within_2"] = total ? static_cast<double>(within2) / total : 0.0;
    ctx.summary["fraction_within_3"] = total ? static_cast<double>(within3) / total : 0.0;
    ctx.summary["max_z"] = max_z;
    if (c.n_stats >= 2) {
        // Same comparison with the standard error of the mean over repetitions.
        ctx.summary["stderr_of_mean"] = {{"fraction_within_2", total ? static_cast<double>(strict2) / total : 0.0},
                                         {"fraction_within_3", total ? static_cast<double>(strict3) / total : 0.0}};
    }
    ctx.check("all_within_3", within3 == total);
    ctx.check("fraction_within_2_at_least_0.9", total > 0 && within2 >= 0.9 * total);
}

void cmd_criticality_sweep(Context& ctx) {
    const auto& c = ctx.config;
    const double cw_c = critical_cw(c.activation, c.inputs);
    bool needs_tensors = false;
    for (const auto& n : c.observables) needs_tensors = needs_tensors || !is_rank2(n);
    json fits = json::array();
    bool ok = true;
    for (double cw : c.cw_list) {
        const bool critical = std::fabs(cw - cw_c) <= 1e-9 * cw_c;
        const std::string expected = critical ? "power_law" : "exponential";
        TheoryRun run;
        if (needs_tensors)
            run = run_theory(c.inputs, c.activation, std::vector<double>(c.depth, cw), false, theory_widths(c.widths));
        else
            run.kernels = run_kernels(c.inputs, c.activation, std::vector<double>(c.depth, cw));
        std::vector<ObservableEstimate> est;
        NetworkSpec spec;
        if (c.n_net > 0) {
            spec = network_spec(c, c.widths, cw);
            est = run_mc(ctx, spec, c.observables, layer_range(1, c.depth));
        }
        for (std::size_t o = 0; o < c.observables.size(); ++o) {
            const auto& name = c.observables[o];
            for (const auto& comp : components_for(c, name, true)) {
                Series th, mc;
                for (int l = 1; l <= c.depth; ++l) {
                    const double v = theory_value(run, name, l, comp);
                    th.emplace_back(l, v);
                    ctx.row(name, comp, std::to_string(l), "inf", cw, v, 0.0, "theory");
                }
                if (!est.empty())
                    for (int l = 1; l <= c.depth; ++l) {
                        const auto& v = estimate_at(est[(l - 1) * c.observables.size() + o], comp);
                        mc.emplace_back(l, v.mean);
                        ctx.row(name, comp, std::to_string(l), std::to_string(spec.widths[l]), cw, v.mean,
                                v.standard_error, "mc");
                    }
                for (const auto* s : {&th, &mc}) {
                    if (s->empty()) continue;
                    json f = fit_both(*s, c.ell_start);
                    f["observable"] = name;
                    f["component"] = component_name(comp);
                    f["cw"] = cw;
                    f["source"] = s == &th ? "theory" : "mc";
                    f["expected"] = expected;
                    bool pass = f["selected"] == expected;
                    if (critical) pass = pass && f["power_law"]["r_squared"].get<double>() >= 0.99;
                    f["pass"] = pass;
                    ok = ok && pass;
                    fits.push_back(f);
                }
            }
        }
    }
    ctx.summary["critical_cw"] = cw_c;
    ctx.summary["fits"] = fits;
    ctx.check("growth_models_match", ok);
}

void cmd_width_sweep(Context& ctx) {
    const auto& c = ctx.config;
    const double cw = c.cw_list.front();
    const int m = c.inputs.size();
    const auto run = run_theory(c.inputs, c.activation, std::vector<double>(c.depth, cw));
    std::map<std::string, std::map<std::pair<int, std::vector<int>>, std::vector<std::pair<double, double>>>> dev;
    for (int n : c.width_list) {
        const auto spec = network_spec(c, std::vector<int>(c.depth, n), cw);
        const auto est = run_mc(ctx, spec, c.observables, c.layers);
        std::size_t i = 0;
        for (int l : c.layers)
            for (const auto& name : c.observables) {
                const auto& e = est[i++];
                const std::string corr = name == "K" ? "K1" : "Theta1";
                for (const auto& comp : all_components(m, 2)) {
                    const std::string layer = std::to_string(l), width = std::to_string(n);
                    const double inf = theory_value(run, name, l, comp);
                    const auto& v = estimate_at(e, comp);
                    ctx.row(name, comp, layer, width, cw, v.mean, v.standard_error, "mc");
                    ctx.row(name + "_rel_dev", comp, layer, width, cw, (v.mean - inf) / inf, v.standard_error / std::fabs(inf),
                            "mc");
                    ctx.row(name + "_rel_dev", comp, layer, width, cw, theory_value(run, corr, l, comp) / (n * inf), 0.0,
                            "theory");
                    dev[name][{l, comp}].emplace_back((v.mean - inf) / inf, v.standard_error / std::fabs(inf));
                }
            }
    }
    for (const auto& name : c.observables)
        for (int l : c.layers)
            for (const auto& comp : all_components(m, 2)) {
                const std::string corr = name == "K" ? "K1" : "Theta1";
                ctx.row(name, comp, std::to_string(l), "inf", cw, theory_value(run, name, l, comp), 0.0, "theory");
                ctx.row(corr, comp, std::to_string(l), "inf", cw, theory_value(run, corr, l, comp), 0.0, "theory");
            }

    const bool scale_invariant = c.activation.scale_invariant;
    bool diag_zero = true, diag_slopes = true, offdiag_slopes = true, diag_detected = true;
    json series = json::array();
    for (const auto& [name, per] : dev)
        for (const auto& [key, vals] : per) {
            const auto& [layer, comp] = key;
            const bool diagonal = comp[0] == comp[1];
            Series s;
            json zs = json::array(), rel = json::array();
            double max_abs_z = 0.0;
            bool nonzero = true;
            for (std::size_t k = 0; k < vals.size(); ++k) {
                s.emplace_back(c.width_list[k], vals[k].first);
                const double z = std::fabs(vals[k].first) / vals[k].second;
                zs.push_back(z);
                rel.push_back(vals[k].first);
                max_abs_z = std::max(max_abs_z, z);
                nonzero = nonzero && vals[k].first != 0.0;
            }
            json j = {{"observable", name}, {"layer", layer},   {"component", component_name(comp)},
                      {"diagonal", diagonal}, {"widths", c.width_list}, {"relative_deviation", rel},
                      {"z", zs},              {"max_abs_z", max_abs_z}};
            double slope = std::numeric_limits<double>::quiet_NaN();
            if (nonzero) {
                const auto f = fit_power_law(s, 0.0);
                j["log_log"] = fit_json(f);
                slope = f.slope;
            }
            series.push_back(j);
            const double z_first = zs.front().get<double>();
            if (diagonal) {
                diag_zero = diag_zero && max_abs_z < 3.0;
                diag_slopes = diag_slopes && std::fabs(slope + 1.0) <= 0.4;
                diag_detected = diag_detected && z_first > 5.0;
            } else {
                offdiag_slopes = offdiag_slopes && std::fabs(slope + 1.0) <= (scale_invariant ? 0.3 : 0.4);
            }
        }
    ctx.summary["series"] = series;
    ctx.summary["scale_invariant"] = scale_invariant;
    if (scale_invariant) {
        ctx.check("diagonal_consistent_with_zero", diag_zero);
        ctx.check("off_diagonal_slope", offdiag_slopes);
    } else {
        ctx.check("diagonal_slope", diag_slopes);
        ctx.check("off_diagonal_slope", offdiag_slopes);
        ctx.check("diagonal_detected_at_smallest_width", diag_detected);
    }
}

void cmd_scale_invariance(Context& ctx) {
    const auto& c = ctx.config;
    const double cw = c.cw_list.front();
    const auto rep = check_scale_invariant_identities(c.activation, c.k_grid, cw, c.theta);
    json grid = json::array();
    double worst9 = 0.0;
    for (std::size_t i = 0; i < rep.kernels.size(); ++i) {
        const std::vector<int> comp = {static_cast<int>(i)};
        ctx.row("kernel", comp, "", "inf", cw, rep.kernels[i], 0.0, "theory");
        ctx.row("eq11_residual", comp, "", "inf", cw, rep.eq11_residuals[i], 0.0, "theory");
        ctx.row("eq9_residual", comp, "", "inf", cw, rep.eq9_residuals[i], 0.0, "theory");
        ctx.row("eq9_consistency", comp, "", "inf", cw, rep.eq9_consistency[i], 0.0, "theory");
        grid.push_back({{"kernel", rep.kernels[i]},
                        {"eq11_residual", rep.eq11_residuals[i]},
                        {"eq9_residual", rep.eq9_residuals[i]},
                        {"eq9_consistency", rep.eq9_consistency[i]},
                        {"scale", rep.scales[i]}});
        worst9 = std::max(worst9, std::fabs(rep.eq9_residuals[i]));
    }
    ctx.summary["grid"] = grid;
    ctx.summary["no_on_diagonal_corrections"] = rep.no_on_diagonal_corrections;
    ctx.check("identities_match_activation_class",
              c.activation.scale_invariant ? rep.no_on_diagonal_corrections
                                           : !rep.no_on_diagonal_corrections && worst9 > 1e-3);

    if (c.depth > 0) {
        const auto run = run_theory(c.inputs, c.activation, std::vector<double>(c.depth, cw));
        double worst = 0.0;
        for (int l = 1; l <= c.depth; ++l) {
            const auto& t = run.tensors[l - 1];
            const auto& k = run.kernels[l - 1];
            const double scale = std::max({1.0, k.K.cwiseAbs().maxCoeff(), k.Theta.cwiseAbs().maxCoeff(),
                                           t.K1.cwiseAbs().maxCoeff(), t.Theta1.cwiseAbs().maxCoeff()});
            for (int a = 0; a < c.inputs.size(); ++a) {
                ctx.row("K1", {a, a}, std::to_string(l), "inf", cw, t.K1(a, a), 0.0, "theory");
                ctx.row("Theta1", {a, a}, std::to_string(l), "inf", cw, t.Theta1(a, a), 0.0, "theory");
                worst = std::max({worst, std::fabs(t.K1(a, a)) / scale, std::fabs(t.Theta1(a, a)) / scale});
            }
        }
        ctx.summary["max_relative_diagonal_correction"] = worst;
        if (c.activation.scale_invariant) ctx.check("diagonal_corrections_machine_zero", worst < 1e-12);
    }
}

void cmd_fit(Context& ctx) {
    const auto& c = ctx.config;
    json fits = json::array();
    for (const auto& [name, s] : c.series) {
        json j = fit_both(s, c.ell_start);
        const auto p = fit_power_law(s, c.ell_start);
        const auto e = fit_exponential(s, c.ell_start);
        for (const auto& [model, f] : {std::pair{"power_law", p}, std::pair{"exponential", e}}) {
            const std::string pre = model;
            ctx.result.rows.push_back({name, pre + ".slope", "", "", std::nullopt, f.slope, 0.0, "fit"});
            ctx.result.rows.push_back({name, pre + ".intercept", "", "", std::nullopt, f.intercept, 0.0, "fit"});
            ctx.result.rows.push_back({name, pre + ".r_squared", "", "", std::nullopt, f.r_squared, 0.0, "fit"});
            ctx.result.rows.push_back({name, pre + ".residual_norm", "", "", std::nullopt, f.residual_norm, 0.0, "fit"});
        }
        j["series"] = name;
        fits.push_back(j);
    }
    ctx.summary["fits"] = fits;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config, int workers) {
    if (workers < 1) throw ConfigError("workers must be at least 1");
    Context ctx{config, workers, {}, json::object(), true};
    ctx.summary["command"] = config.command;
    ctx.summary["checks"] = json::object();
    if (config.command != "fit") {
        ctx.summary["activation"] = config.activation.name();
        ctx.summary["inputs"] = config.inputs.size();
        ctx.summary["depth"] = config.depth;
        ctx.summary["seed"] = config.seed;
    }
    const auto& cmd = config.command;
    if (cmd == "infinite-width")
        cmd_infinite_width(ctx);
    else if (cmd == "tensors")
        cmd_tensors(ctx);
    else if (cmd == "mc-estimate")
        cmd_mc_estimate(ctx);
    else if (cmd == "tensor-compare")
        cmd_tensor_compare(ctx);
    else if (cmd == "criticality-sweep")
        cmd_criticality_sweep(ctx);
    else if (cmd == "width-sweep")
        cmd_width_sweep(ctx);
    else if (cmd == "scale-invariance-check")
        cmd_scale_invariance(ctx);
    else if (cmd == "fit")
        cmd_fit(ctx);
    else
        throw ConfigError("unknown command '" + cmd + "'");
    ctx.summary["pass"] = ctx.passed;
    ctx.result.passed = ctx.passed;
    ctx.result.summary_json = ctx.summary.dump(2) + "\n";
    return std::move(ctx.result);
}

std::string format_csv(const std::vector<CsvRow>& rows) {
    std::string out = "observable,component,layer,width,cw,value,stderr,source\n";
    for (const auto& r : rows) {
        out += r.observable + "," + r.component + "," + r.layer + "," + r.width + "," +
               (r.cw ? fmt17(*r.cw) : std::string()) + "," + fmt17(r.value) + "," + fmt17(r.stderr_) + "," + r.source +
               "\n";
    }
    return out;
}

void write_outputs(const ExperimentResult& result, const std::string& out_dir) {
    fs::create_directories(out_dir);
    auto write = [](const fs::path& p, const std::string& text) {
        std::ofstream f(p, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot write " + p.string());
        f << text;
    };
    write(fs::path(out_dir) / "results.csv", format_csv(result.rows));
    write(fs::path(out_dir) / "summary.json", result.summary_json);
}

}  // namespace ntkorders
