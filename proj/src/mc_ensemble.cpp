#include "ntkorders/mc_ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <set>
#include <stdexcept>

#include <omp.h>

#include "ntkorders/rng.hpp"

namespace ntkorders {

void NetworkSpec::validate() const {
    if (widths.size() < 2) throw std::invalid_argument("network needs an input width and at least one layer");
    for (int n : widths)
        if (n < 1) throw std::invalid_argument("widths must be positive");
    if (static_cast<int>(cw_schedule.size()) != depth())
        throw std::invalid_argument("C_W schedule must have one entry per layer");
    for (double c : cw_schedule)
        if (!(c > 0.0) || !std::isfinite(c)) throw std::invalid_argument("C_W entries must be positive");
    if (parametrization != "ntk") throw std::invalid_argument("only the ntk parametrization is supported");
}

NetworkSpec make_uniform_spec(int n0, int width, int depth, const ActivationModel& activation, double cw,
                              std::uint64_t seed) {
    NetworkSpec spec;
    spec.widths.assign(static_cast<std::size_t>(depth) + 1, width);
    spec.widths[0] = n0;
    spec.activation = activation;
    spec.cw_schedule.assign(static_cast<std::size_t>(depth), cw);
    spec.base_seed = seed;
    spec.validate();
    return spec;
}

SampledNetwork sample_network(const NetworkSpec& spec, std::int64_t index) {
    spec.validate();
    if (index < 0) throw std::invalid_argument("network index must be non-negative");
    SampledNetwork net;
    net.network_index = index;
    for (int l = 1; l <= spec.depth(); ++l) {
        Eigen::MatrixXd w(spec.widths[l], spec.widths[l - 1]);
        fill_standard_normal(spec.base_seed, static_cast<std::uint64_t>(index), static_cast<std::uint64_t>(l), w);
        net.weights.push_back(std::move(w));
    }
    return net;
}

namespace {

Eigen::MatrixXd apply(const ActivationModel& model, int order, const Eigen::MatrixXd& z) {
    return z.unaryExpr([&](double v) { return eval_unchecked(model, order, v); });
}

}  // namespace

std::vector<Eigen::MatrixXd> forward_pass(const NetworkSpec& spec, const SampledNetwork& net, const InputSet& inputs) {
    spec.validate();
    if (inputs.dimension() != spec.widths[0]) throw std::invalid_argument("input dimension does not match n_0");
    std::vector<Eigen::MatrixXd> z;
    Eigen::MatrixXd prev = inputs.matrix().transpose();
    for (int l = 1; l <= spec.depth(); ++l) {
        const double scale = std::sqrt(spec.cw_schedule[l - 1] / spec.widths[l - 1]);
        if (l > 1) prev = apply(spec.activation, 0, prev);
        z.push_back(scale * (net.weights[l - 1] * prev));
        prev = z.back();
    }
    return z;
}

const char* observable_name(ObservableKind kind) {
    static const char* names[] = {"K", "Theta", "V4", "D", "F", "A", "B"};
    return names[static_cast<int>(kind)];
}

ObservableKind observable_kind_from_name(const std::string& name) {
    for (int i = 0; i <= static_cast<int>(ObservableKind::B); ++i)
        if (name == observable_name(static_cast<ObservableKind>(i))) return static_cast<ObservableKind>(i);
    throw std::invalid_argument("unknown observable '" + name + "'");
}

namespace {

bool needs_ntk(ObservableKind k) { return k != ObservableKind::K && k != ObservableKind::V4; }

// Offsets of the per-network sufficient statistics recorded at one layer.
struct Layout {
    int m = 0, P = 0;
    bool ntk = false;
    int K = 0, Kfix = 0, Q4 = 0, KK = 0, t = 0, tfix = 0, tt = 0, Kt = 0, FroN = 0, FroT = 0, Fz = 0, DD = 0, ZD = 0,
        size = 0;
    std::vector<int> pair_index;  // m x m -> pair id, symmetric

    Layout(int m_, bool ntk_) : m(m_), P(m_ * (m_ + 1) / 2), ntk(ntk_), pair_index(m_ * m_) {
        int id = 0;
        for (int a = 0; a < m; ++a)
            for (int b = a; b < m; ++b) pair_index[a * m + b] = pair_index[b * m + a] = id++;
        int off = 0;
        K = off, off += P;
        Kfix = off, off += P;
        Q4 = off, off += P * P;
        KK = off, off += P * P;
        if (ntk) {
            t = off, off += P;
            tfix = off, off += P;
            tt = off, off += P * P;
            Kt = off, off += P * P;
            FroN = off, off += P * P;
            FroT = off, off += P * P;
            Fz = off, off += m * m * P;
            DD = off, off += P * P;
            ZD = off, off += P * P;
        }
        size = off;
    }
    int pair(int a, int b) const { return pair_index[a * m + b]; }
};

struct Workspace {
    Eigen::MatrixXd z, s, sp, w, zn, tmp, zz, sub, vec, vec_t, diag;
    std::vector<Eigen::MatrixXd> theta, theta_next, y;
    std::vector<std::vector<int>> active;
    std::vector<double> theta_scale;  // layer 1: theta[p] is theta_scale[p] times the identity
};

// Columns of w scaled by d, keeping only the entries where d is nonzero.
void compact_columns(const Eigen::MatrixXd& w, const Eigen::VectorXd& d, std::vector<int>& active, Eigen::MatrixXd& y) {
    active.clear();
    for (Eigen::Index k = 0; k < d.size(); ++k)
        if (d(k) != 0.0) active.push_back(static_cast<int>(k));
    y.resize(w.rows(), static_cast<Eigen::Index>(active.size()));
    for (std::size_t j = 0; j < active.size(); ++j) y.col(j) = w.col(active[j]) * d(active[j]);
}

// Forward recursion for preactivations and the full channel-by-channel NTK of every input pair.
class NetEvaluator {
public:
    NetEvaluator(const NetworkSpec& spec, const InputSet& inputs, std::vector<int> layers, bool ntk)
        : spec_(spec), x_(inputs.matrix().transpose()), layers_(std::move(layers)), layout_(inputs.size(), ntk) {}

    const Layout& layout() const { return layout_; }
    std::size_t stride() const { return static_cast<std::size_t>(layout_.size) * layers_.size(); }

    void run(std::int64_t index, double* out, Workspace& ws) const {
        const int m = layout_.m, P = layout_.P;
        const int lmax = layers_.back();
        const auto& act = spec_.activation;
        ws.w.resize(spec_.widths[1], spec_.widths[0]);
        fill_standard_normal(spec_.base_seed, static_cast<std::uint64_t>(index), 1, ws.w);
        const double c1 = spec_.cw_schedule[0] / spec_.widths[0];
        ws.z.noalias() = std::sqrt(c1) * (ws.w * x_);
        if (layout_.ntk) {
            ws.theta.resize(P);
            ws.theta_next.resize(P);
            ws.y.resize(m);
            ws.active.resize(m);
            ws.theta_scale.assign(P, 0.0);
            for (int a = 0; a < m; ++a)
                for (int b = a; b < m; ++b) ws.theta_scale[layout_.pair(a, b)] = c1 * x_.col(a).dot(x_.col(b));
            if (layers_.front() == 1)
                for (int p = 0; p < P; ++p)
                    ws.theta[p] = Eigen::MatrixXd::Identity(spec_.widths[1], spec_.widths[1]) * ws.theta_scale[p];
        }
        std::size_t slot = 0;
        for (int l = 1; l <= lmax; ++l) {
            if (slot < layers_.size() && layers_[slot] == l) {
                record(l, ws, out + slot * layout_.size);
                ++slot;
            }
            if (l == lmax) break;
            const int n = spec_.widths[l], nn = spec_.widths[l + 1];
            const double c = spec_.cw_schedule[l] / n;
            ws.s = apply(act, 0, ws.z);
            ws.w.resize(nn, n);
            fill_standard_normal(spec_.base_seed, static_cast<std::uint64_t>(index), static_cast<std::uint64_t>(l + 1),
                                 ws.w);
            ws.zn.noalias() = std::sqrt(c) * (ws.w * ws.s);
            if (layout_.ntk) {
                ws.sp = apply(act, 1, ws.z);
                for (int a = 0; a < m; ++a) compact_columns(ws.w, ws.sp.col(a), ws.active[a], ws.y[a]);
                for (int a = 0; a < m; ++a)
                    for (int b = a; b < m; ++b) {
                        const int p = layout_.pair(a, b);
                        auto& next = ws.theta_next[p];
                        next.resize(nn, nn);
                        if (l == 1) {
                            // theta is a multiple of the identity: only shared active units contribute.
                            const auto& ia = ws.active[a];
                            const auto& ib = ws.active[b];
                            ws.tmp.resize(nn, static_cast<Eigen::Index>(ib.size()));
                            ws.tmp.setZero();
                            std::size_t j = 0;
                            for (std::size_t i = 0; i < ia.size(); ++i) {
                                while (j < ib.size() && ib[j] < ia[i]) ++j;
                                if (j < ib.size() && ib[j] == ia[i]) ws.tmp.col(j) = ws.y[a].col(i);
                            }
                            next.noalias() = (c * ws.theta_scale[p]) * (ws.tmp * ws.y[b].transpose());
                        } else {
                            const auto& ia = ws.active[a];
                            const auto& ib = ws.active[b];
                            ws.sub.resize(static_cast<Eigen::Index>(ia.size()), static_cast<Eigen::Index>(ib.size()));
                            for (std::size_t j = 0; j < ib.size(); ++j)
                                for (std::size_t i = 0; i < ia.size(); ++i) ws.sub(i, j) = ws.theta[p](ia[i], ib[j]);
                            ws.tmp.noalias() = ws.y[a] * ws.sub;
                            next.noalias() = c * (ws.tmp * ws.y[b].transpose());
                        }
                        next.diagonal().array() += c * ws.s.col(a).dot(ws.s.col(b));
                    }
                std::swap(ws.theta, ws.theta_next);
            }
            std::swap(ws.z, ws.zn);
        }
    }

private:
    void record(int l, Workspace& ws, double* o) const {
        const Layout& L = layout_;
        const int m = L.m, P = L.P;
        const int n = spec_.widths[l];
        const double inv_n = 1.0 / n, inv_n2 = inv_n * inv_n;
        const auto& z = ws.z;
        ws.zz.resize(n, P);
        for (int a = 0; a < m; ++a)
            for (int b = a; b < m; ++b) {
                const int p = L.pair(a, b);
                ws.zz.col(p) = z.col(a).cwiseProduct(z.col(b));
                o[L.K + p] = ws.zz.col(p).sum() * inv_n;
                o[L.Kfix + p] = z(0, a) * z(0, b);
            }
        const Eigen::MatrixXd q4 = (ws.zz.transpose() * ws.zz) * inv_n;
        for (int p = 0; p < P; ++p)
            for (int q = 0; q < P; ++q) {
                o[L.Q4 + p * P + q] = q4(p, q);
                o[L.KK + p * P + q] = o[L.K + p] * o[L.K + q];
            }
        if (!L.ntk) return;
        ws.diag.resize(n, P);
        for (int p = 0; p < P; ++p) {
            ws.diag.col(p) = ws.theta[p].diagonal();
            o[L.t + p] = ws.diag.col(p).sum() * inv_n;
            o[L.tfix + p] = ws.theta[p](0, 0);
        }
        // Same-channel products, removed from the pair sums by the distinct-pair estimators.
        const Eigen::MatrixXd dd = (ws.diag.transpose() * ws.diag) * inv_n;
        const Eigen::MatrixXd zd = (ws.zz.transpose() * ws.diag) * inv_n;
        for (int p = 0; p < P; ++p)
            for (int q = 0; q < P; ++q) {
                o[L.DD + p * P + q] = dd(p, q);
                o[L.ZD + p * P + q] = zd(p, q);
            }
        // Frobenius products of every pair of NTK blocks, direct and with one block transposed.
        const Eigen::Index n2 = static_cast<Eigen::Index>(n) * n;
        ws.vec.resize(n2, P);
        ws.vec_t.resize(n2, P);
        for (int p = 0; p < P; ++p) {
            ws.vec.col(p) = Eigen::Map<const Eigen::VectorXd>(ws.theta[p].data(), n2);
            Eigen::Map<Eigen::MatrixXd>(ws.vec_t.col(p).data(), n, n) = ws.theta[p].transpose();
        }
        const Eigen::MatrixXd fro = ws.vec.transpose() * ws.vec;
        const Eigen::MatrixXd fro_t = ws.vec_t.transpose() * ws.vec;
        for (int p = 0; p < P; ++p)
            for (int q = 0; q < P; ++q) {
                o[L.tt + p * P + q] = o[L.t + p] * o[L.t + q];
                o[L.Kt + p * P + q] = o[L.K + p] * o[L.t + q];
                o[L.FroN + p * P + q] = fro(p, q) * inv_n2;
                o[L.FroT + p * P + q] = fro_t(p, q) * inv_n2;
            }
        for (int p = 0; p < P; ++p) {
            ws.tmp.noalias() = ws.theta[p] * z;
            const Eigen::MatrixXd f = z.transpose() * ws.tmp;
            for (int a = 0; a < m; ++a)
                for (int b = 0; b < m; ++b) o[L.Fz + (a * m + b) * P + p] = f(a, b) * inv_n2;
        }
    }

    const NetworkSpec& spec_;
    Eigen::MatrixXd x_;
    std::vector<int> layers_;
    Layout layout_;
};

// Fixed-shape pairwise sum over items [lo, hi) of a list of equally sized vectors.
std::vector<double> pairwise_sum(const std::vector<std::vector<double>>& items, std::size_t lo, std::size_t hi) {
    if (hi - lo == 1) return items[lo];
    const std::size_t mid = lo + (hi - lo) / 2;
    auto left = pairwise_sum(items, lo, mid);
    const auto right = pairwise_sum(items, mid, hi);
    for (std::size_t i = 0; i < left.size(); ++i) left[i] += right[i];
    return left;
}

// Evaluates every estimator from a vector of per-network statistic means.
class Estimators {
public:
    Estimators(const NetworkSpec& spec, const Layout& layout, const std::vector<int>& layers, ChannelMode channel,
               ChannelPairs pairs)
        : spec_(spec), L_(layout), layers_(layers), channel_(channel), distinct_(pairs == ChannelPairs::distinct) {}

    double value(const double* mean, const Observable& obs, int a, int b, int c, int d) const {
        const double* s = mean + slot(obs.layer) * L_.size;
        const int P = L_.P, m = L_.m;
        const double n = spec_.widths[obs.layer], np = spec_.widths[obs.layer - 1];
        auto pr = [&](int x, int y) { return L_.pair(x, y); };
        auto kbar = [&](int x, int y) { return s[L_.K + pr(x, y)]; };
        auto tbar = [&](int x, int y) { return s[L_.t + pr(x, y)]; };
        switch (obs.kind) {
            case ObservableKind::K:
                return channel_ == ChannelMode::trace_average ? kbar(a, b) : s[L_.Kfix + pr(a, b)];
            case ObservableKind::Theta:
                return channel_ == ChannelMode::trace_average ? tbar(a, b) : s[L_.tfix + pr(a, b)];
            case ObservableKind::V4: {
                const int p = pr(a, b), q = pr(c, d);
                return np * (n / (n - 1.0) * s[L_.KK + p * P + q] - s[L_.Q4 + p * P + q] / (n - 1.0) -
                             kbar(a, b) * kbar(c, d));
            }
            case ObservableKind::A: {
                const int p = pr(a, b), q = pr(c, d);
                const double tt = s[L_.tt + p * P + q];
                if (distinct_)
                    return np * ((n * tt - s[L_.DD + p * P + q]) / (n - 1.0) - tbar(a, b) * tbar(c, d));
                return np * (tt - tbar(a, b) * tbar(c, d));
            }
            case ObservableKind::D: {
                const int p = pr(a, b), q = pr(c, d);
                const double kt = s[L_.Kt + p * P + q];
                if (distinct_)
                    return np * ((n * kt - s[L_.ZD + p * P + q]) / (n - 1.0) - kbar(a, b) * tbar(c, d));
                return np * (kt - kbar(a, b) * tbar(c, d));
            }
            case ObservableKind::B: {
                // NTK pairs (a, c) and (b, d); a pair stored as (y, x) with y > x is a transpose.
                const int p = pr(a, c), q = pr(b, d);
                const bool flip = (a > c) != (b > d);
                const double fro = s[(flip ? L_.FroT : L_.FroN) + p * P + q];
                if (distinct_) return np * (n * fro - s[L_.DD + p * P + q]) / (n - 1.0);
                return np * (fro - tbar(a, c) * tbar(b, d) / n);
            }
            case ObservableKind::F: {
                // Preactivations a and c, NTK pair (b, d).
                const int p = pr(b, d);
                const double fz = b <= d ? s[L_.Fz + (a * m + c) * P + p] : s[L_.Fz + (c * m + a) * P + p];
                if (distinct_) return np * (n * fz - s[L_.ZD + pr(a, c) * P + p]) / (n - 1.0);
                return np * (fz - tbar(b, d) * kbar(a, c) / n);
            }
        }
        return 0.0;
    }

    std::size_t slot(int layer) const {
        return static_cast<std::size_t>(std::lower_bound(layers_.begin(), layers_.end(), layer) - layers_.begin());
    }

private:
    const NetworkSpec& spec_;
    const Layout& L_;
    const std::vector<int>& layers_;
    ChannelMode channel_;
    bool distinct_;
};

int components(const Observable& obs, int m) {
    return (obs.kind == ObservableKind::K || obs.kind == ObservableKind::Theta) ? m * m : m * m * m * m;
}

void unflatten(const Observable& obs, int m, int idx, int& a, int& b, int& c, int& d) {
    if (obs.kind == ObservableKind::K || obs.kind == ObservableKind::Theta) {
        a = idx / m, b = idx % m, c = d = 0;
        return;
    }
    d = idx % m, idx /= m;
    c = idx % m, idx /= m;
    b = idx % m, a = idx / m;
}

void check_observables(const NetworkSpec& spec, const std::vector<Observable>& observables) {
    for (const auto& o : observables)
        if (o.layer < 1 || o.layer > spec.depth())
            throw std::invalid_argument("observable layer " + std::to_string(o.layer) + " outside 1.." +
                                        std::to_string(spec.depth()));
}

double sample_std(const std::vector<double>& v) {
    if (v.size() < 2) return std::numeric_limits<double>::quiet_NaN();
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace

std::vector<ObservableEstimate> run_ensemble(const NetworkSpec& spec, const InputSet& inputs,
                                             const std::vector<Observable>& observables,
                                             const EnsembleOptions& options) {
    spec.validate();
    if (inputs.dimension() != spec.widths[0]) throw std::invalid_argument("input dimension does not match n_0");
    if (options.workers < 1) throw std::invalid_argument("workers must be at least 1");
    if (options.n_net < 2 || options.n_stats < 1) throw std::invalid_argument("need n_net >= 2 and n_stats >= 1");
    check_observables(spec, observables);
    if (observables.empty()) return {};

    std::set<int> layer_set;
    bool ntk = false;
    for (const auto& o : observables) {
        layer_set.insert(o.layer);
        ntk = ntk || needs_ntk(o.kind);
    }
    const std::vector<int> layers(layer_set.begin(), layer_set.end());
    NetEvaluator evaluator(spec, inputs, layers, ntk);
    const std::size_t stride = evaluator.stride();
    const int m = inputs.size();

    const std::int64_t chunks_per_rep = (options.n_net + kChunkSize - 1) / kChunkSize;
    const std::int64_t total_chunks = chunks_per_rep * options.n_stats;
    std::vector<std::vector<double>> sums(total_chunks), squares(total_chunks);
    std::vector<std::int64_t> counts(total_chunks);

#pragma omp parallel num_threads(options.workers)
    {
        Workspace ws;
        std::vector<double> buf(stride);
#pragma omp for schedule(dynamic, 1)
        for (std::int64_t chunk = 0; chunk < total_chunks; ++chunk) {
            const std::int64_t rep = chunk / chunks_per_rep, c = chunk % chunks_per_rep;
            const std::int64_t first = rep * options.n_net + c * kChunkSize;
            const std::int64_t last = std::min(first + kChunkSize, (rep + 1) * options.n_net);
            std::vector<double> sum(stride, 0.0), sq(stride, 0.0);
            for (std::int64_t net = first; net < last; ++net) {
                evaluator.run(net, buf.data(), ws);
                for (std::size_t i = 0; i < stride; ++i) {
                    sum[i] += buf[i];
                    sq[i] += buf[i] * buf[i];
                }
            }
            sums[chunk] = std::move(sum);
            squares[chunk] = std::move(sq);
            counts[chunk] = last - first;
        }
    }

    const Estimators est(spec, evaluator.layout(), layers, options.channel, options.pairs);
    std::vector<std::vector<double>> rep_means(options.n_stats), rep_sq(options.n_stats);
    for (int r = 0; r < options.n_stats; ++r) {
        const std::size_t lo = static_cast<std::size_t>(r * chunks_per_rep), hi = lo + chunks_per_rep;
        rep_means[r] = pairwise_sum(sums, lo, hi);
        rep_sq[r] = pairwise_sum(squares, lo, hi);
        for (std::size_t i = 0; i < stride; ++i) {
            rep_means[r][i] /= static_cast<double>(options.n_net);
            rep_sq[r][i] /= static_cast<double>(options.n_net);
        }
    }

    std::vector<ObservableEstimate> out;
    for (const auto& obs : observables) {
        ObservableEstimate oe;
        oe.observable = obs;
        oe.m = m;
        const int nc = components(obs, m);
        oe.values.resize(nc);
        for (int idx = 0; idx < nc; ++idx) {
            int a, b, c, d;
            unflatten(obs, m, idx, a, b, c, d);
            EnsembleEstimate e;
            e.n_samples = options.n_net * options.n_stats;
            e.n_repetitions = options.n_stats;
            std::vector<double> per_rep(options.n_stats);
            for (int r = 0; r < options.n_stats; ++r) per_rep[r] = est.value(rep_means[r].data(), obs, a, b, c, d);
            for (double v : per_rep) e.mean += v;
            e.mean /= options.n_stats;
            if (options.n_stats >= 2) {
                e.standard_error = sample_std(per_rep);
            } else if (obs.kind == ObservableKind::K || obs.kind == ObservableKind::Theta) {
                // The mean is linear in one statistic; its per-network variance gives the error.
                const Layout& L = evaluator.layout();
                const bool trace = options.channel == ChannelMode::trace_average;
                int off = obs.kind == ObservableKind::K ? (trace ? L.K : L.Kfix) : (trace ? L.t : L.tfix);
                off += L.pair(a, b) + static_cast<int>(est.slot(obs.layer)) * L.size;
                const double mu = rep_means[0][off], var = std::max(0.0, rep_sq[0][off] - mu * mu);
                const double N = static_cast<double>(options.n_net);
                e.standard_error = std::sqrt(var * N / (N - 1.0) / N);
            } else {
                // Grouped jackknife over network chunks.
                const std::int64_t G = chunks_per_rep;
                if (G < 2) {
                    e.standard_error = std::numeric_limits<double>::quiet_NaN();
                } else {
                    std::vector<double> loo(G), means(stride);
                    const double N = static_cast<double>(options.n_net);
                    for (std::int64_t g = 0; g < G; ++g) {
                        const double ng = static_cast<double>(counts[g]);
                        for (std::size_t i = 0; i < stride; ++i) means[i] = (rep_means[0][i] * N - sums[g][i]) / (N - ng);
                        loo[g] = est.value(means.data(), obs, a, b, c, d);
                    }
                    double lm = 0.0;
                    for (double v : loo) lm += v;
                    lm /= static_cast<double>(G);
                    double ss = 0.0;
                    for (double v : loo) ss += (v - lm) * (v - lm);
                    e.standard_error = std::sqrt(ss * static_cast<double>(G - 1) / static_cast<double>(G));
                }
            }
            oe.values[idx] = e;
        }
        out.push_back(std::move(oe));
    }
    return out;
}

Rank4<EnsembleEstimate> estimate_rank4(const NetworkSpec& spec, const InputSet& inputs, int layer, ObservableKind kind,
                                       std::int64_t n_net, int n_stats, int workers) {
    if (kind == ObservableKind::K || kind == ObservableKind::Theta)
        throw std::invalid_argument("estimate_rank4 needs one of V4, D, F, A, B");
    EnsembleOptions opts;
    opts.n_net = n_net;
    opts.n_stats = n_stats;
    opts.workers = workers;
    const auto res = run_ensemble(spec, inputs, {Observable{kind, layer}}, opts);
    Rank4<EnsembleEstimate> out(inputs.size());
    out.data = res.front().values;
    return out;
}

namespace {

void partitions(unsigned rest, std::vector<unsigned>& current, const std::function<void(const std::vector<unsigned>&)>& f) {
    if (rest == 0) {
        f(current);
        return;
    }
    const unsigned low = rest & (~rest + 1u);
    const unsigned others = rest & ~low;
    // Every block containing the lowest remaining element.
    for (unsigned sub = others;; sub = (sub - 1) & others) {
        current.push_back(low | sub);
        partitions(others & ~sub, current, f);
        current.pop_back();
        if (sub == 0) break;
    }
}

}  // namespace

double moment_to_cumulant(const std::map<unsigned, double>& moments, int n) {
    if (n < 1 || n > 4) throw std::invalid_argument("moment_to_cumulant supports 1 to 4 variables");
    const unsigned full = (1u << n) - 1u;
    for (unsigned s = 1; s <= full; ++s)
        if (!moments.count(s)) throw std::invalid_argument("missing moment for subset mask " + std::to_string(s));
    static const double fact[] = {1, 1, 2, 6};
    double total = 0.0;
    std::vector<unsigned> current;
    partitions(full, current, [&](const std::vector<unsigned>& blocks) {
        const std::size_t k = blocks.size();
        double term = fact[k - 1] * ((k - 1) % 2 ? -1.0 : 1.0);
        for (unsigned b : blocks) term *= moments.at(b);
        total += term;
    });
    return total;
}

}  // namespace ntkorders
