#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>

#include "ntkorders/mc_ensemble.hpp"

namespace ntkorders {

EmpiricalKernels empirical_kernels(const NetworkSpec& spec, const SampledNetwork& net, const InputSet& inputs,
                                   int layer) {
    if (layer < 1 || layer > spec.depth()) throw std::invalid_argument("layer out of range");
    const int m = inputs.size();
    const auto z = forward_pass(spec, net, inputs);
    const auto& act = spec.activation;

    // post[k] is the input of layer k+1: x for k = 0, sigma(z^(k)) otherwise.
    std::vector<Eigen::MatrixXd> post(layer);
    post[0] = inputs.matrix().transpose();
    for (int k = 1; k < layer; ++k) post[k] = z[k - 1].unaryExpr([&](double v) { return eval(act, 0, v); });

    const int n = spec.widths[layer];
    EmpiricalKernels out;
    out.layer = layer;
    out.z = z[layer - 1];
    out.theta.assign(static_cast<std::size_t>(m) * m, Eigen::MatrixXd::Zero(n, n));

    // chain[a] = dz^(layer)_a / dz^(k)_a, walked from k = layer down to 1.
    std::vector<Eigen::MatrixXd> chain(m, Eigen::MatrixXd::Identity(n, n));
    for (int k = layer; k >= 1; --k) {
        const double c = spec.cw_schedule[k - 1] / spec.widths[k - 1];
        for (int a = 0; a < m; ++a)
            for (int b = 0; b < m; ++b)
                out.theta[a * m + b] += c * post[k - 1].col(a).dot(post[k - 1].col(b)) * chain[a] * chain[b].transpose();
        if (k == 1) break;
        for (int a = 0; a < m; ++a) {
            Eigen::VectorXd d = z[k - 2].col(a).unaryExpr([&](double v) { return eval(act, 1, v); });
            chain[a] = (std::sqrt(c) * chain[a] * net.weights[k - 1]) * d.asDiagonal();
        }
    }

    out.K_trace.resize(m, m);
    out.Theta_trace.resize(m, m);
    out.K_channel0.resize(m, m);
    out.Theta_channel0.resize(m, m);
    for (int a = 0; a < m; ++a)
        for (int b = 0; b < m; ++b) {
            out.K_trace(a, b) = out.z.col(a).dot(out.z.col(b)) / n;
            out.K_channel0(a, b) = out.z(0, a) * out.z(0, b);
            out.Theta_trace(a, b) = out.theta[a * m + b].trace() / n;
            out.Theta_channel0(a, b) = out.theta[a * m + b](0, 0);
        }
    return out;
}

namespace {

// Estimator of one repetition, written as the literal channel sums.
double literal_estimate(const std::vector<EmpiricalKernels>& nets, const Observable& obs, int a, int b, int c, int d,
                        double np, ChannelMode channel, ChannelPairs pairs) {
    const double N = static_cast<double>(nets.size());
    const int n = static_cast<int>(nets.front().z.rows());
    const int m = static_cast<int>(nets.front().z.cols());
    Eigen::MatrixXd kbar = Eigen::MatrixXd::Zero(m, m), tbar = Eigen::MatrixXd::Zero(m, m);
    for (const auto& e : nets) {
        kbar += e.K_trace;
        tbar += e.Theta_trace;
    }
    kbar /= N;
    tbar /= N;
    auto dtheta = [&](const EmpiricalKernels& e, int x, int y, int i, int j) {
        return e.ntk(x, y)(i, j) - (i == j ? tbar(x, y) : 0.0);
    };

    const bool distinct = pairs == ChannelPairs::distinct;
    auto skip = [&](int i, int j) { return distinct && i == j; };
    double acc = 0.0;
    switch (obs.kind) {
        case ObservableKind::K:
        case ObservableKind::Theta: {
            for (const auto& e : nets) {
                const bool k = obs.kind == ObservableKind::K;
                if (channel == ChannelMode::trace_average)
                    acc += k ? e.K_trace(a, b) : e.Theta_trace(a, b);
                else
                    acc += k ? e.K_channel0(a, b) : e.Theta_channel0(a, b);
            }
            return acc / N;
        }
        case ObservableKind::V4: {
            for (const auto& e : nets)
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j)
                        if (i != j) acc += e.z(i, a) * e.z(i, b) * e.z(j, c) * e.z(j, d);
            return np / (static_cast<double>(n) * (n - 1)) * acc / N - np * kbar(a, b) * kbar(c, d);
        }
        case ObservableKind::A:
            for (const auto& e : nets)
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j)
                        if (!skip(i, j)) acc += dtheta(e, a, b, i, i) * dtheta(e, c, d, j, j);
            break;
        case ObservableKind::B:
            for (const auto& e : nets)
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j)
                        if (!skip(i, j)) acc += dtheta(e, a, c, i, j) * dtheta(e, b, d, i, j);
            break;
        case ObservableKind::D:
            for (const auto& e : nets)
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j)
                        if (!skip(i, j)) acc += e.z(i, a) * e.z(i, b) * dtheta(e, c, d, j, j);
            break;
        case ObservableKind::F:
            for (const auto& e : nets)
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j)
                        if (!skip(i, j)) acc += e.z(i, a) * e.z(j, c) * dtheta(e, b, d, i, j);
            break;
    }
    const double pairs_count = distinct ? static_cast<double>(n) * (n - 1) : static_cast<double>(n) * n;
    return np / pairs_count * acc / N;
}

}  // namespace

std::vector<ObservableEstimate> run_ensemble_reference(const NetworkSpec& spec, const InputSet& inputs,
                                                       const std::vector<Observable>& observables,
                                                       const EnsembleOptions& options) {
    spec.validate();
    if (options.n_net < 2 || options.n_stats < 1) throw std::invalid_argument("need n_net >= 2 and n_stats >= 1");
    const int m = inputs.size();
    std::set<int> layers;
    for (const auto& o : observables) {
        if (o.layer < 1 || o.layer > spec.depth()) throw std::invalid_argument("observable layer out of range");
        layers.insert(o.layer);
    }
    // per_rep[layer][rep] holds the empirical kernels of every network in the repetition.
    std::map<int, std::vector<std::vector<EmpiricalKernels>>> per_rep;
    for (int layer : layers) per_rep[layer].resize(options.n_stats);
    for (int r = 0; r < options.n_stats; ++r)
        for (std::int64_t i = 0; i < options.n_net; ++i) {
            const auto net = sample_network(spec, r * options.n_net + i);
            for (int layer : layers) per_rep[layer][r].push_back(empirical_kernels(spec, net, inputs, layer));
        }

    std::vector<ObservableEstimate> out;
    for (const auto& obs : observables) {
        ObservableEstimate oe;
        oe.observable = obs;
        oe.m = m;
        const bool kernel = obs.kind == ObservableKind::K || obs.kind == ObservableKind::Theta;
        const int nc = kernel ? m * m : m * m * m * m;
        const double np = spec.widths[obs.layer - 1];
        for (int idx = 0; idx < nc; ++idx) {
            int a, b, c = 0, d = 0;
            if (kernel) {
                a = idx / m, b = idx % m;
            } else {
                a = idx / (m * m * m), b = (idx / (m * m)) % m, c = (idx / m) % m, d = idx % m;
            }
            std::vector<double> vals;
            for (const auto& rep : per_rep[obs.layer])
                vals.push_back(literal_estimate(rep, obs, a, b, c, d, np, options.channel, options.pairs));
            EnsembleEstimate e;
            e.n_samples = options.n_net * options.n_stats;
            e.n_repetitions = options.n_stats;
            for (double v : vals) e.mean += v;
            e.mean /= static_cast<double>(vals.size());
            if (vals.size() >= 2) {
                double ss = 0.0;
                for (double v : vals) ss += (v - e.mean) * (v - e.mean);
                e.standard_error = std::sqrt(ss / static_cast<double>(vals.size() - 1));
            } else {
                e.standard_error = std::numeric_limits<double>::quiet_NaN();
            }
            oe.values.push_back(e);
        }
        out.push_back(std::move(oe));
    }
    return out;
}

}  // namespace ntkorders
