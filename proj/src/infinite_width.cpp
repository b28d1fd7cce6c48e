#include "ntkorders/infinite_width.hpp"

#include <cmath>
#include <stdexcept>

#include "ntkorders/errors.hpp"

namespace ntkorders {

InputSet::InputSet(std::vector<std::vector<double>> inputs) {
    if (inputs.empty()) throw std::invalid_argument("input set must contain at least one input");
    const std::size_t n0 = inputs.front().size();
    if (n0 == 0) throw std::invalid_argument("inputs must have positive dimension");
    Eigen::MatrixXd x(inputs.size(), n0);
    for (std::size_t a = 0; a < inputs.size(); ++a) {
        if (inputs[a].size() != n0) throw std::invalid_argument("inputs must share one dimension");
        for (std::size_t i = 0; i < n0; ++i) x(a, i) = inputs[a][i];
    }
    *this = InputSet(x);
}

InputSet::InputSet(const Eigen::MatrixXd& rows) : x_(rows) {
    if (x_.rows() == 0 || x_.cols() == 0) throw std::invalid_argument("input set must be non-empty");
    if (!x_.allFinite()) throw std::invalid_argument("inputs must be finite");
    for (int a = 0; a < x_.rows(); ++a)
        for (int b = a + 1; b < x_.rows(); ++b)
            if ((x_.row(a) - x_.row(b)).cwiseAbs().maxCoeff() <= 1e-12)
                throw std::invalid_argument("inputs must be pairwise distinct");
}

InputSet InputSet::scaled(double factor) const { return InputSet(Eigen::MatrixXd(x_ * factor)); }

InputSet InputSet::subset(const std::vector<int>& indices) const {
    Eigen::MatrixXd x(indices.size(), x_.cols());
    for (std::size_t k = 0; k < indices.size(); ++k) {
        if (indices[k] < 0 || indices[k] >= x_.rows()) throw std::invalid_argument("input index out of range");
        x.row(k) = x_.row(indices[k]);
    }
    return InputSet(x);
}

KernelState init_kernels(const InputSet& inputs, double cw1, int n0) {
    if (n0 != inputs.dimension()) throw std::invalid_argument("n0 does not match the input dimension");
    if (!(cw1 > 0.0)) throw std::invalid_argument("C_W must be positive");
    KernelState s;
    s.layer = 1;
    s.K = cw1 * inputs.matrix() * inputs.matrix().transpose() / static_cast<double>(n0);
    s.Theta = s.K;
    return s;
}

namespace {

MomentQuery pair_query(int a, int oa, int b, int ob) { return MomentQuery{{{a, oa}, {b, ob}}, {}, {}}; }

}  // namespace

KernelState step_kernels(const KernelState& state, const ActivationModel& model, double cw,
                         const MomentOptions& options) {
    const int m = static_cast<int>(state.K.rows());
    KernelState next;
    next.layer = state.layer + 1;
    next.K.resize(m, m);
    next.Theta.resize(m, m);
    MomentCache cache(model, state.K, options);
    for (int a = 0; a < m; ++a)
        for (int b = a; b < m; ++b) {
            cache.request(pair_query(a, 0, b, 0));
            cache.request(pair_query(a, 1, b, 1));
        }
    try {
        cache.evaluate_pending();
    } catch (const NumericalError& e) {
        throw NumericalError("kernel recursion layer " + std::to_string(next.layer), e.what());
    }
    for (int a = 0; a < m; ++a)
        for (int b = a; b < m; ++b) {
            const double k = cw * cache.get(pair_query(a, 0, b, 0));
            const double t = k + cw * cache.get(pair_query(a, 1, b, 1)) * state.Theta(a, b);
            next.K(a, b) = next.K(b, a) = k;
            next.Theta(a, b) = next.Theta(b, a) = t;
        }
    return next;
}

std::vector<KernelState> run_kernels(const InputSet& inputs, const ActivationModel& model,
                                     const std::vector<double>& cw_schedule, const MomentOptions& options) {
    if (cw_schedule.empty()) throw std::invalid_argument("C_W schedule must cover at least one layer");
    std::vector<KernelState> out{init_kernels(inputs, cw_schedule.front(), inputs.dimension())};
    for (std::size_t l = 1; l < cw_schedule.size(); ++l)
        out.push_back(step_kernels(out.back(), model, cw_schedule[l], options));
    return out;
}

Susceptibilities susceptibilities(const KernelState& state, const ActivationModel& model, double cw,
                                  const MomentOptions& options) {
    const int m = static_cast<int>(state.K.rows());
    Susceptibilities s;
    s.m = m;
    s.chi_perp.resize(m, m);
    s.chi_bowtie.resize(m, m);
    s.chi_parallel = Tensor4(m);
    s.chi_circ.assign(static_cast<std::size_t>(m) * m * m, 0.0);
    MomentCache cache(model, state.K, options);
    MomentOptions stein = options;
    stein.route = DerivativeRoute::stein;
    for (int a = 0; a < m; ++a)
        for (int b = 0; b < m; ++b) {
            s.chi_perp(a, b) = cw * cache.get(pair_query(a, 1, b, 1));
            s.chi_bowtie(a, b) = cw * cache.get(pair_query(a, 2, b, 0));
            for (int g = 0; g < m; ++g) {
                for (int d = 0; d < m; ++d)
                    s.chi_parallel(a, b, g, d) = 0.5 * cw * cache.get(MomentQuery{{{a, 0}, {b, 0}}, {g, d}, {}});
                s.chi_circ[(a * m + g) * m + b] =
                    cw * expect_partial_product(model, MomentQuery{{{a, 0}, {b, 1}}, {g}, {}}, state.K, stein);
            }
        }
    return s;
}

std::vector<double> chi_circ_delta_expansion(const KernelState& state, const ActivationModel& model, double cw,
                                             const MomentOptions& options) {
    const int m = static_cast<int>(state.K.rows());
    std::vector<double> out(static_cast<std::size_t>(m) * m * m, 0.0);
    for (int e = 0; e < m; ++e)
        for (int g = 0; g < m; ++g)
            for (int l = 0; l < m; ++l) {
                double v = 0.0;
                if (e == g) v += expect_product(model, pair_query(e, 1, l, 1), state.K, options);
                if (g == l) v += expect_product(model, pair_query(e, 0, l, 2), state.K, options);
                out[(e * m + g) * m + l] = cw * v;
            }
    return out;
}

namespace {

double single(const ActivationModel& model, int o1, int o2, double K, const MomentOptions& options) {
    Eigen::MatrixXd c(1, 1);
    c(0, 0) = K;
    return expect_product(model, pair_query(0, o1, 0, o2), c, options);
}

}  // namespace

CriticalPoint critical_point(const ActivationModel& model, const MomentOptions& options) {
    if (model.scale_invariant) {
        const double a = 0.5 * (model.a_plus * model.a_plus + model.a_minus * model.a_minus);
        return {1.0 / a, 0.0};
    }
    // chi_parallel = chi_perp at the fixed point reduces to <sigma sigma''>_K = 0; the first
    // positive root on a logarithmic scan is refined by bisection.
    auto g = [&](double K) { return single(model, 0, 2, K, options); };
    double lo = 1e-3, glo = g(lo);
    const int steps = 240;
    for (int i = 1; i <= steps; ++i) {
        const double hi = 1e-3 * std::pow(1e6, static_cast<double>(i) / steps);
        const double ghi = g(hi);
        if (glo == 0.0) return {1.0 / single(model, 1, 1, lo, options), lo};
        if ((glo < 0.0) != (ghi < 0.0)) {
            double a = lo, b = hi, ga = glo;
            for (int it = 0; it < 200 && b - a > 1e-13 * b; ++it) {
                const double mid = 0.5 * (a + b);
                const double gm = g(mid);
                if ((gm < 0.0) == (ga < 0.0)) {
                    a = mid;
                    ga = gm;
                } else {
                    b = mid;
                }
            }
            const double K = 0.5 * (a + b);
            return {1.0 / single(model, 1, 1, K, options), K};
        }
        lo = hi;
        glo = ghi;
    }
    const double d1 = eval(model, 1, 0.0);
    if (d1 == 0.0) throw NumericalError("critical_cw", "no critical point found");
    return {1.0 / (d1 * d1), 0.0};
}

double critical_cw(const ActivationModel& model, const InputSet& inputs, const MomentOptions& options) {
    (void)inputs;
    const double cw = critical_point(model, options).cw;
    if (!(cw >= 0.1 && cw <= 10.0)) throw NumericalError("critical_cw", "critical C_W outside [0.1, 10]");
    return cw;
}

}  // namespace ntkorders
