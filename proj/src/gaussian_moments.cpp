#include "ntkorders/gaussian_moments.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <numbers>

#include "ntkorders/errors.hpp"

namespace ntkorders {

namespace {

constexpr int kMaxDim = 4;
constexpr double kPi = std::numbers::pi;
using Exps = std::array<int, kMaxDim>;

struct Mono {
    Exps e{};
    double c = 0.0;
};
using Poly = std::vector<Mono>;

void add_mono(Poly& p, const Exps& e, double c) {
    for (auto& m : p) {
        if (m.e == e) {
            m.c += c;
            return;
        }
    }
    p.push_back({e, c});
}

Poly poly_mul(const Poly& a, const Poly& b) {
    Poly out;
    for (const auto& x : a)
        for (const auto& y : b) {
            Exps e{};
            for (int k = 0; k < kMaxDim; ++k) e[k] = x.e[k] + y.e[k];
            add_mono(out, e, x.c * y.c);
        }
    return out;
}

Poly poly_deriv(const Poly& p, int v) {
    Poly out;
    for (const auto& m : p) {
        if (m.e[v] == 0) continue;
        Exps e = m.e;
        --e[v];
        add_mono(out, e, m.c * m.e[v]);
    }
    return out;
}

Poly poly_sub(const Poly& a, const Poly& b) {
    Poly out = a;
    for (const auto& m : b) add_mono(out, m.e, -m.c);
    return out;
}

double mono_eval(const Exps& e, const double* z, int d) {
    double v = 1.0;
    for (int k = 0; k < d; ++k)
        for (int i = 0; i < e[k]; ++i) v *= z[k];
    return v;
}

int mono_degree(const Exps& e) { return e[0] + e[1] + e[2] + e[3]; }

struct Term {
    double coef = 1.0;
    std::vector<Factor> factors;
    Poly poly;
};

struct LocalProblem {
    int d = 0;
    Eigen::MatrixXd cov;
    std::vector<Factor> factors;
    std::vector<int> partials;
    Exps weights{};
    bool vanishes = false;
};

void validate_covariance(const Eigen::MatrixXd& cov) {
    if (cov.rows() != cov.cols() || cov.rows() == 0)
        throw std::invalid_argument("covariance must be a non-empty square matrix");
    if (!cov.allFinite()) throw NumericalError("gaussian_moments", "covariance has non-finite entries");
    const double scale = std::max(cov.cwiseAbs().maxCoeff(), 1e-300);
    if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
        throw NumericalError("gaussian_moments", "covariance is not symmetric");
    const double trace = cov.trace();
    if (trace < 0.0) throw NumericalError("gaussian_moments", "covariance has negative trace");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -1e-10 * std::max(trace, 1e-300))
        throw NumericalError("gaussian_moments", "covariance is not positive semi-definite");
}

LocalProblem localize(const MomentQuery& q, const Eigen::MatrixXd& cov) {
    if (q.factors.empty()) throw std::invalid_argument("moment query needs at least one factor");
    const int m = static_cast<int>(cov.rows());
    std::vector<int> global;
    auto local_of = [&](int g, bool insert) -> int {
        if (g < 0 || g >= m) throw std::invalid_argument("moment query variable out of range");
        for (std::size_t i = 0; i < global.size(); ++i)
            if (global[i] == g) return static_cast<int>(i);
        if (!insert) return -1;
        global.push_back(g);
        return static_cast<int>(global.size()) - 1;
    };
    LocalProblem lp;
    for (const auto& f : q.factors) {
        if (f.order < 0 || f.order > 3) throw std::invalid_argument("factor derivative order must be 0..3");
        lp.factors.push_back({local_of(f.var, true), f.order});
    }
    for (int w : q.z_weights) {
        const int l = local_of(w, true);
        if (l >= kMaxDim) break;
        ++lp.weights[l];
    }
    if (global.size() > static_cast<std::size_t>(kMaxDim))
        throw std::invalid_argument("moment queries support at most 4 distinct variables");
    for (int p : q.partials) {
        const int l = local_of(p, false);
        if (l < 0) lp.vanishes = true;
        lp.partials.push_back(l);
    }
    lp.d = static_cast<int>(global.size());
    lp.cov.resize(lp.d, lp.d);
    for (int i = 0; i < lp.d; ++i)
        for (int j = 0; j < lp.d; ++j) lp.cov(i, j) = 0.5 * (cov(global[i], global[j]) + cov(global[j], global[i]));
    return lp;
}

Poly weight_poly(const Exps& w) { return Poly{Mono{w, 1.0}}; }

std::vector<Term> product_rule_terms(const LocalProblem& lp) {
    std::vector<Term> terms{Term{1.0, lp.factors, weight_poly(lp.weights)}};
    for (int g : lp.partials) {
        std::vector<Term> next;
        for (const auto& t : terms) {
            for (std::size_t k = 0; k < t.factors.size(); ++k) {
                if (t.factors[k].var != g) continue;
                Term u = t;
                ++u.factors[k].order;
                next.push_back(std::move(u));
            }
            Poly dp = poly_deriv(t.poly, g);
            if (!dp.empty()) next.push_back(Term{t.coef, t.factors, std::move(dp)});
        }
        terms = std::move(next);
    }
    return terms;
}

// Hermite weight H_Gamma with E[d_Gamma f] = E[f H_Gamma] for f under N(0, cov).
Poly hermite_weight(const std::vector<int>& partials, const Eigen::MatrixXd& precision) {
    const int d = static_cast<int>(precision.rows());
    Poly h{Mono{Exps{}, 1.0}};
    for (int g : partials) {
        Poly y;
        for (int j = 0; j < d; ++j) {
            Exps e{};
            e[j] = 1;
            add_mono(y, e, precision(g, j));
        }
        h = poly_sub(poly_mul(y, h), poly_deriv(h, g));
    }
    return h;
}

std::vector<Term> stein_terms(const LocalProblem& lp) {
    const Eigen::MatrixXd precision = gram_inverse(lp.cov);
    return {Term{1.0, lp.factors, poly_mul(weight_poly(lp.weights), hermite_weight(lp.partials, precision))}};
}

enum class Support { ok, zero, unsupported };

Support kinked_support(const Term& t, int d) {
    for (int v = 0; v < d; ++v) {
        int count[4] = {0, 0, 0, 0};
        for (const auto& f : t.factors)
            if (f.var == v) ++count[std::min(f.order, 3)];
        if (count[3] > 0) return Support::unsupported;
        if (count[2] == 0) continue;
        if (count[0] > 0) return Support::zero;
        if (count[2] > 1 || count[1] > 0) return Support::unsupported;
    }
    return Support::ok;
}

bool smooth_supported(const ActivationModel& model, const std::vector<Term>& terms) {
    for (const auto& t : terms)
        for (const auto& f : t.factors)
            if (f.order > model.max_smooth_derivative_order) return false;
    return true;
}

bool kinked_supported(const std::vector<Term>& terms, int d) {
    for (const auto& t : terms)
        if (kinked_support(t, d) == Support::unsupported) return false;
    return true;
}

// Factor cov = L L^T with L of shape d x rank.
Eigen::MatrixXd whitening_factor(const Eigen::MatrixXd& cov) {
    const int d = static_cast<int>(cov.rows());
    const double trace = cov.trace();
    if (trace <= 0.0) return Eigen::MatrixXd::Zero(d, 0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    const double tol = 1e-10 * trace;
    int rank = 0;
    for (int i = 0; i < d; ++i)
        if (es.eigenvalues()(i) > tol) ++rank;
    if (rank == d) {
        Eigen::LLT<Eigen::MatrixXd> llt(cov);
        if (llt.info() == Eigen::Success) return llt.matrixL();
        Eigen::MatrixXd jittered = cov + 1e-12 * trace * Eigen::MatrixXd::Identity(d, d);
        llt.compute(jittered);
        if (llt.info() == Eigen::Success) return llt.matrixL();
    }
    Eigen::MatrixXd L(d, rank);
    int c = 0;
    for (int i = d - rank; i < d; ++i, ++c) L.col(c) = es.eigenvectors().col(i) * std::sqrt(es.eigenvalues()(i));
    return L;
}

double smooth_expectation(const ActivationModel& model, const std::vector<Term>& terms,
                          const Eigen::MatrixXd& cov, const MomentOptions& opt) {
    const int d = static_cast<int>(cov.rows());
    const Eigen::MatrixXd L = whitening_factor(cov);
    const int r = static_cast<int>(L.cols());
    bool need[kMaxDim][4] = {};
    for (const auto& t : terms)
        for (const auto& f : t.factors) need[f.var][f.order] = true;

    auto integrand = [&](const double* z) {
        double vals[kMaxDim][4];
        for (int v = 0; v < d; ++v)
            for (int o = 0; o < 4; ++o)
                if (need[v][o]) vals[v][o] = eval_unchecked(model, o, z[v]);
        double total = 0.0;
        for (const auto& t : terms) {
            double f = t.coef;
            for (const auto& fa : t.factors) f *= vals[fa.var][fa.order];
            if (f == 0.0) continue;
            double p = 0.0;
            for (const auto& m : t.poly) p += m.c * mono_eval(m.e, z, d);
            total += f * p;
        }
        return total;
    };

    if (r == 0) {
        const double z[kMaxDim] = {0, 0, 0, 0};
        return integrand(z);
    }
    const int n = r == 1 ? opt.nodes_1d : (r == 2 ? opt.nodes_2d : opt.nodes_high);
    const QuadratureRule& rule = gauss_hermite_rule(n);
    std::array<int, kMaxDim> idx{};
    double total = 0.0;
    double z[kMaxDim];
    while (true) {
        double w = 1.0;
        for (int k = 0; k < r; ++k) w *= rule.weights[idx[k]];
        for (int v = 0; v < d; ++v) {
            double s = 0.0;
            for (int k = 0; k < r; ++k) s += L(v, k) * rule.nodes[idx[k]];
            z[v] = s;
        }
        total += w * integrand(z);
        int k = 0;
        while (k < r && ++idx[k] == n) idx[k++] = 0;
        if (k == r) break;
    }
    return total;
}

// ----- kinked activations: exact polar rule for rank <= 2 and orthant recursion otherwise -----

// Integral over rho in (0, inf) of rho^k exp(-rho^2 / 2).
double half_gaussian_moment(int k) { return std::pow(2.0, 0.5 * (k - 1)) * std::tgamma(0.5 * (k + 1)); }

double polar_expectation(const ActivationModel& model, const Term& t, const Eigen::MatrixXd& cov,
                         const MomentOptions& opt) {
    const int d = static_cast<int>(cov.rows());
    const Eigen::MatrixXd L = whitening_factor(cov);
    const int r = static_cast<int>(L.cols());
    int homogeneous_degree = 0;
    for (const auto& f : t.factors)
        if (f.order == 0) ++homogeneous_degree;

    // Angular part: factors and monomials evaluated on the unit direction, radial moments exact.
    auto angular = [&](const double* z, int rank) {
        double f = t.coef;
        for (const auto& fa : t.factors) f *= eval_unchecked(model, fa.order, z[fa.var]);
        if (f == 0.0) return 0.0;
        double p = 0.0;
        for (const auto& m : t.poly) {
            const int k = homogeneous_degree + mono_degree(m.e);
            p += m.c * mono_eval(m.e, z, d) * half_gaussian_moment(k + rank - 1);
        }
        return f * p;
    };

    if (r == 0) {
        const double z[kMaxDim] = {0, 0, 0, 0};
        double f = t.coef;
        for (const auto& fa : t.factors) f *= eval_unchecked(model, fa.order, 0.0);
        double p = 0.0;
        for (const auto& m : t.poly) p += m.c * mono_eval(m.e, z, d);
        return f * p;
    }
    double z[kMaxDim];
    if (r == 1) {
        double total = 0.0;
        for (double s : {1.0, -1.0}) {
            for (int v = 0; v < d; ++v) z[v] = s * L(v, 0);
            total += angular(z, 1);
        }
        return total / std::sqrt(2.0 * kPi);
    }
    std::vector<double> breaks{0.0, 2.0 * kPi};
    for (const auto& fa : t.factors) {
        const double a = L(fa.var, 0), b = L(fa.var, 1);
        if (std::hypot(a, b) == 0.0) continue;
        double th = std::atan2(-a, b);
        for (int k = 0; k < 2; ++k, th += kPi) {
            double x = std::fmod(th, 2.0 * kPi);
            if (x < 0) x += 2.0 * kPi;
            breaks.push_back(x);
        }
    }
    std::sort(breaks.begin(), breaks.end());
    const QuadratureRule& gl = gauss_legendre_rule(opt.polar_angular_nodes);
    double total = 0.0;
    for (std::size_t a = 0; a + 1 < breaks.size(); ++a) {
        const double lo = breaks[a], hi = breaks[a + 1];
        if (hi - lo <= 0.0) continue;
        const double half = 0.5 * (hi - lo), mid = 0.5 * (hi + lo);
        for (std::size_t k = 0; k < gl.nodes.size(); ++k) {
            const double th = mid + half * gl.nodes[k];
            const double c = std::cos(th), s = std::sin(th);
            for (int v = 0; v < d; ++v) z[v] = L(v, 0) * c + L(v, 1) * s;
            total += half * gl.weights[k] * angular(z, 2);
        }
    }
    return total / (2.0 * kPi);
}

struct SmallGauss {
    int d = 0;
    double S[kMaxDim][kMaxDim] = {};
};

SmallGauss small_from(const Eigen::MatrixXd& cov) {
    SmallGauss g;
    g.d = static_cast<int>(cov.rows());
    for (int i = 0; i < g.d; ++i)
        for (int j = 0; j < g.d; ++j) g.S[i][j] = cov(i, j);
    return g;
}

double orthant_correlation(const double R[kMaxDim][kMaxDim], int d);

double small_orthant_probability(const SmallGauss& g) {
    double R[kMaxDim][kMaxDim];
    for (int i = 0; i < g.d; ++i)
        for (int j = 0; j < g.d; ++j) R[i][j] = g.S[i][j] / std::sqrt(g.S[i][i] * g.S[j][j]);
    return orthant_correlation(R, g.d);
}

double plackett_four(const double R[kMaxDim][kMaxDim]) {
    static constexpr int pairs[6][4] = {{0, 1, 2, 3}, {0, 2, 1, 3}, {0, 3, 1, 2},
                                        {1, 2, 0, 3}, {1, 3, 0, 2}, {2, 3, 0, 1}};
    auto integrand = [&](double t) {
        double sum = 0.0;
        for (const auto& p : pairs) {
            const int i = p[0], j = p[1], k = p[2], l = p[3];
            const double rij = R[i][j];
            if (rij == 0.0) continue;
            const double rt = t * rij;
            const double det = 1.0 - rt * rt;
            // Conditional covariance of (k, l) given z_i = z_j = 0 along the path R(t).
            const double aki = t * R[k][i], akj = t * R[k][j], ali = t * R[l][i], alj = t * R[l][j];
            auto quad = [&](double xi, double xj, double yi, double yj) {
                return (xi * yi - rt * xi * yj - rt * xj * yi + xj * yj) / det;
            };
            const double ckk = 1.0 - quad(aki, akj, aki, akj);
            const double cll = 1.0 - quad(ali, alj, ali, alj);
            const double ckl = t * R[k][l] - quad(aki, akj, ali, alj);
            double rho = ckl / std::sqrt(ckk * cll);
            rho = std::clamp(rho, -1.0, 1.0);
            sum += rij / (2.0 * kPi * std::sqrt(det)) * (0.25 + std::asin(rho) / (2.0 * kPi));
        }
        return sum;
    };
    // t = 1 - u^2 removes the 1/sqrt(1 - t^2 r^2) endpoint singularity as |r| -> 1.
    auto smooth = [&](double u) { return 2.0 * u * integrand(1.0 - u * u); };
    const double integral =
        boost::math::quadrature::gauss_kronrod<double, 61>::integrate(smooth, 0.0, 1.0, 15, 1e-13);
    return 1.0 / 16.0 + integral;
}

double orthant_correlation(const double R[kMaxDim][kMaxDim], int d) {
    switch (d) {
        case 0: return 1.0;
        case 1: return 0.5;
        case 2: return 0.25 + std::asin(std::clamp(R[0][1], -1.0, 1.0)) / (2.0 * kPi);
        case 3:
            return 0.125 + (std::asin(std::clamp(R[0][1], -1.0, 1.0)) + std::asin(std::clamp(R[0][2], -1.0, 1.0)) +
                            std::asin(std::clamp(R[1][2], -1.0, 1.0))) /
                               (4.0 * kPi);
        default: return plackett_four(R);
    }
}

SmallGauss condition_on_zero(const SmallGauss& g, int j) {
    SmallGauss c;
    c.d = g.d - 1;
    for (int a = 0, ia = 0; a < g.d; ++a) {
        if (a == j) continue;
        for (int b = 0, ib = 0; b < g.d; ++b) {
            if (b == j) continue;
            c.S[ia][ib] = g.S[a][b] - g.S[a][j] * g.S[j][b] / g.S[j][j];
            ++ib;
        }
        ++ia;
    }
    return c;
}

unsigned drop_bit(unsigned mask, int j) {
    const unsigned low = mask & ((1u << j) - 1u);
    const unsigned high = (mask >> (j + 1)) << j;
    return low | high;
}

// E[ prod z_k^{a_k} * 1{z_k > 0 for k in T} ] by Gaussian integration by parts.
double orthant_moment(const SmallGauss& g, unsigned T, Exps a) {
    int keep[kMaxDim];
    int nk = 0;
    for (int k = 0; k < g.d; ++k)
        if (a[k] > 0 || (T >> k & 1u)) keep[nk++] = k;
    if (nk < g.d) {
        SmallGauss h;
        h.d = nk;
        unsigned T2 = 0;
        Exps a2{};
        for (int i = 0; i < nk; ++i) {
            for (int j = 0; j < nk; ++j) h.S[i][j] = g.S[keep[i]][keep[j]];
            if (T >> keep[i] & 1u) T2 |= 1u << i;
            a2[i] = a[keep[i]];
        }
        return orthant_moment(h, T2, a2);
    }
    int i = -1;
    for (int k = 0; k < g.d; ++k)
        if (a[k] > 0) {
            i = k;
            break;
        }
    if (i < 0) return small_orthant_probability(g);
    for (int k = 0; k < g.d; ++k)
        if (g.S[k][k] <= 0.0) throw NumericalError("gaussian_moments", "degenerate variable in orthant moment");
    Exps b = a;
    --b[i];
    double total = 0.0;
    for (int j = 0; j < g.d; ++j) {
        const double sij = g.S[i][j];
        if (sij == 0.0) continue;
        if (b[j] > 0) {
            Exps c = b;
            --c[j];
            total += sij * b[j] * orthant_moment(g, T, c);
        } else if (T >> j & 1u) {
            const SmallGauss h = condition_on_zero(g, j);
            Exps c{};
            for (int k = 0, ik = 0; k < g.d; ++k)
                if (k != j) c[ik++] = b[k];
            total += sij / std::sqrt(2.0 * kPi * g.S[j][j]) * orthant_moment(h, drop_bit(T, j), c);
        }
    }
    return total;
}

double orthant_expectation(const ActivationModel& model, const Term& t, const Eigen::MatrixXd& cov) {
    const int d = static_cast<int>(cov.rows());
    const SmallGauss g = small_from(cov);
    int p[kMaxDim] = {}, m[kMaxDim] = {};
    for (const auto& f : t.factors) {
        if (f.order == 0) ++p[f.var];
        ++m[f.var];
    }
    std::vector<int> kinked_vars;
    for (int v = 0; v < d; ++v)
        if (m[v] > 0) kinked_vars.push_back(v);
    double total = 0.0;
    const unsigned nsub = 1u << kinked_vars.size();
    for (const auto& mono : t.poly) {
        Exps a = mono.e;
        for (int v = 0; v < d; ++v) a[v] += p[v];
        for (unsigned s = 0; s < nsub; ++s) {
            double coef = t.coef * mono.c;
            unsigned T = 0;
            for (std::size_t k = 0; k < kinked_vars.size(); ++k) {
                const int v = kinked_vars[k];
                const double c0 = std::pow(model.a_minus, m[v]);
                const double c1 = std::pow(model.a_plus, m[v]) - c0;
                if (s >> k & 1u) {
                    coef *= c1;
                    T |= 1u << v;
                } else {
                    coef *= c0;
                }
            }
            if (coef == 0.0) continue;
            total += coef * orthant_moment(g, T, a);
        }
    }
    return total;
}

double kinked_term_expectation(const ActivationModel& model, Term t, const Eigen::MatrixXd& cov,
                               const MomentOptions& opt) {
    const int d = static_cast<int>(cov.rows());
    switch (kinked_support(t, d)) {
        case Support::zero: return 0.0;
        case Support::unsupported:
            throw UnsupportedDerivative(model.name() + ": derivative has no pointwise or distributional rule");
        case Support::ok: break;
    }
    std::vector<int> delta;
    std::vector<Factor> rest;
    for (const auto& f : t.factors) {
        if (f.order == 2) delta.push_back(f.var);
        else rest.push_back(f);
    }
    Poly poly;
    for (const auto& mono : t.poly) {
        bool hits = false;
        for (int v : delta) hits = hits || mono.e[v] > 0;
        if (!hits && mono.c != 0.0) poly.push_back(mono);
    }
    if (poly.empty()) return 0.0;
    double coef = t.coef * std::pow(model.a_plus - model.a_minus, static_cast<double>(delta.size()));

    // Remaining variables that actually enter the integrand.
    std::vector<int> used;
    for (int v = 0; v < d; ++v) {
        if (std::find(delta.begin(), delta.end(), v) != delta.end()) continue;
        bool in = false;
        for (const auto& f : rest) in = in || f.var == v;
        for (const auto& mono : poly) in = in || mono.e[v] > 0;
        if (in) used.push_back(v);
    }
    const int nd = static_cast<int>(delta.size()), nu = static_cast<int>(used.size());
    Eigen::MatrixXd cuu(nu, nu), cud(nu, nd), cdd(nd, nd);
    for (int i = 0; i < nu; ++i) {
        for (int j = 0; j < nu; ++j) cuu(i, j) = cov(used[i], used[j]);
        for (int j = 0; j < nd; ++j) cud(i, j) = cov(used[i], delta[j]);
    }
    for (int i = 0; i < nd; ++i)
        for (int j = 0; j < nd; ++j) cdd(i, j) = cov(delta[i], delta[j]);
    Eigen::MatrixXd cond = cuu;
    if (nd > 0) {
        Eigen::LLT<Eigen::MatrixXd> llt(cdd);
        if (llt.info() != Eigen::Success || cdd.determinant() <= 1e-14 * std::pow(cdd.trace(), nd))
            throw NumericalError("gaussian_moments", "delta variable has singular covariance");
        coef *= 1.0 / std::sqrt(std::pow(2.0 * kPi, nd) * cdd.determinant());
        cond = cuu - cud * llt.solve(cud.transpose());
        cond = 0.5 * (cond + cond.transpose());
    }
    Term reduced;
    reduced.coef = coef;
    for (const auto& f : rest) {
        const int nv = static_cast<int>(std::find(used.begin(), used.end(), f.var) - used.begin());
        reduced.factors.push_back({nv, f.order});
    }
    for (const auto& mono : poly) {
        Mono nm;
        nm.c = mono.c;
        for (int i = 0; i < nu; ++i) nm.e[i] = mono.e[used[i]];
        reduced.poly.push_back(nm);
    }
    if (nu == 0) {
        double p = 0.0;
        for (const auto& mono : reduced.poly) p += mono.c;
        return reduced.coef * p;
    }
    const Eigen::MatrixXd L = whitening_factor(cond);
    if (L.cols() <= 2) return polar_expectation(model, reduced, cond, opt);
    if (L.cols() < nu)
        throw NumericalError("gaussian_moments", "rank-deficient covariance of rank > 2 for a kinked activation");
    return orthant_expectation(model, reduced, cond);
}

double core_expectation(const ActivationModel& model, const MomentQuery& query, const Eigen::MatrixXd& cov,
                        const MomentOptions& opt) {
    validate_covariance(cov);
    const LocalProblem lp = localize(query, cov);
    if (lp.vanishes) return 0.0;
    if (opt.use_closed_forms && model.scale_invariant && lp.partials.empty()) {
        if (auto v = scale_invariant_closed_form(model, query, cov)) return *v;
    }
    std::vector<Term> terms;
    if (opt.route == DerivativeRoute::stein && !lp.partials.empty()) {
        terms = stein_terms(lp);
    } else {
        terms = product_rule_terms(lp);
        const bool supported = model.kinked() ? kinked_supported(terms, lp.d) : smooth_supported(model, terms);
        if (!supported) {
            if (opt.route == DerivativeRoute::product_rule || lp.partials.empty())
                throw UnsupportedDerivative(model.name() + ": derivative order unsupported");
            terms = stein_terms(lp);
        }
    }
    if (!model.kinked()) {
        if (!smooth_supported(model, terms)) throw UnsupportedDerivative(model.name() + ": derivative order unsupported");
        return smooth_expectation(model, terms, lp.cov, opt);
    }
    double total = 0.0;
    for (auto& t : terms) total += kinked_term_expectation(model, std::move(t), lp.cov, opt);
    return total;
}

// E[z^k 1{z > 0}] for z ~ N(0, K).
double positive_half_moment(int k, double K) {
    return std::pow(K, 0.5 * k) * half_gaussian_moment(k) / std::sqrt(2.0 * kPi);
}

// E[z1^p1 z2^p2 1{z1>0}^t1 1{z2>0}^t2] for p, t in {0, 1}.
double bivariate_table(int p1, int p2, int t1, int t2, double k11, double k22, double k12) {
    if (p1 == 1 && p2 == 0) return bivariate_table(0, 1, t2, t1, k22, k11, k12);
    const double rho = k12 / std::sqrt(k11 * k22);
    const double theta = std::acos(std::clamp(rho, -1.0, 1.0));
    const double s2pi = std::sqrt(2.0 * kPi);
    if (p1 == 0 && p2 == 0) {
        if (t1 + t2 == 0) return 1.0;
        if (t1 + t2 == 1) return 0.5;
        return (kPi - theta) / (2.0 * kPi);
    }
    if (p1 == 1 && p2 == 1) {
        if (t1 + t2 == 0) return k12;
        if (t1 + t2 == 1) return 0.5 * k12;
        return std::sqrt(k11 * k22) * (std::sin(theta) + (kPi - theta) * std::cos(theta)) / (2.0 * kPi);
    }
    // p1 = 0, p2 = 1: moments of z2.
    if (t1 == 0 && t2 == 0) return 0.0;
    if (t1 == 0 && t2 == 1) return std::sqrt(k22) / s2pi;
    if (t1 == 1 && t2 == 0) return k12 / (s2pi * std::sqrt(k11));
    return std::sqrt(k22) * (1.0 + rho) / (2.0 * s2pi);
}

}  // namespace

double expect_product(const ActivationModel& model, const MomentQuery& query, const Eigen::MatrixXd& cov,
                      const MomentOptions& options) {
    return core_expectation(model, query, cov, options);
}

double expect_partial_product(const ActivationModel& model, const MomentQuery& query, const Eigen::MatrixXd& cov,
                              const MomentOptions& options) {
    return core_expectation(model, query, cov, options);
}

std::optional<double> scale_invariant_closed_form(const ActivationModel& model, const MomentQuery& query,
                                                  const Eigen::MatrixXd& cov) {
    if (!model.scale_invariant || !query.partials.empty() || query.factors.empty()) return std::nullopt;
    LocalProblem lp;
    try {
        lp = localize(query, cov);
    } catch (const std::exception&) {
        return std::nullopt;
    }
    int p[kMaxDim] = {}, m[kMaxDim] = {}, two[kMaxDim] = {};
    bool high = false;
    for (const auto& f : lp.factors) {
        if (f.order == 0) ++p[f.var];
        if (f.order <= 1) ++m[f.var];
        if (f.order == 2) ++two[f.var];
        if (f.order >= 2) high = true;
    }
    if (high) {
        if (!model.kinked()) return 0.0;
        for (int v = 0; v < lp.d; ++v)
            if (two[v] > 0 && p[v] > 0) return 0.0;
        return std::nullopt;
    }
    for (int v = 0; v < lp.d; ++v)
        if (lp.cov(v, v) <= 0.0) return std::nullopt;
    if (lp.d == 1) {
        const int k = p[0] + lp.weights[0];
        const double K = lp.cov(0, 0);
        const double h = positive_half_moment(k, K);
        const double neg = (k % 2 == 0) ? h : -h;
        return std::pow(model.a_plus, m[0]) * h + std::pow(model.a_minus, m[0]) * neg;
    }
    if (lp.d == 2) {
        if (lp.weights[0] != 0 || lp.weights[1] != 0 || p[0] > 1 || p[1] > 1) return std::nullopt;
        const double k11 = lp.cov(0, 0), k22 = lp.cov(1, 1), k12 = lp.cov(0, 1);
        if (std::abs(k12) >= (1.0 - 1e-12) * std::sqrt(k11 * k22)) return std::nullopt;
        double total = 0.0;
        for (int t1 = 0; t1 < 2; ++t1)
            for (int t2 = 0; t2 < 2; ++t2) {
                const double c0a = std::pow(model.a_minus, m[0]), c0b = std::pow(model.a_minus, m[1]);
                const double ca = t1 ? std::pow(model.a_plus, m[0]) - c0a : c0a;
                const double cb = t2 ? std::pow(model.a_plus, m[1]) - c0b : c0b;
                if (ca * cb == 0.0) continue;
                total += ca * cb * bivariate_table(p[0], p[1], t1, t2, k11, k22, k12);
            }
        return total;
    }
    return std::nullopt;
}

Eigen::MatrixXd gram_inverse(const Eigen::MatrixXd& cov) {
    if (cov.rows() != cov.cols() || cov.rows() == 0) throw std::invalid_argument("gram_inverse needs a square matrix");
    const double trace = cov.trace();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (cov + cov.transpose()), Eigen::EigenvaluesOnly);
    if (!(trace > 0.0) || es.eigenvalues().minCoeff() <= 1e-12 * trace)
        throw NumericalError("gram_inverse", "covariance is singular");
    Eigen::LDLT<Eigen::MatrixXd> ldlt(cov);
    return ldlt.solve(Eigen::MatrixXd::Identity(cov.rows(), cov.cols()));
}

double orthant_probability(const Eigen::MatrixXd& cov) {
    if (cov.rows() > kMaxDim) throw std::invalid_argument("orthant_probability supports at most 4 dimensions");
    if (cov.rows() == 0) return 1.0;
    validate_covariance(cov);
    return small_orthant_probability(small_from(cov));
}

namespace {

QuadratureRule jacobi_rule(int n, bool hermite) {
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
    for (int k = 1; k < n; ++k) {
        const double b = hermite ? std::sqrt(static_cast<double>(k))
                                 : k / std::sqrt(4.0 * k * k - 1.0);
        J(k, k - 1) = J(k - 1, k) = b;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
    QuadratureRule rule;
    const double mass = hermite ? 1.0 : 2.0;
    std::vector<std::pair<double, double>> nw;
    for (int i = 0; i < n; ++i) {
        const double v = es.eigenvectors()(0, i);
        nw.emplace_back(es.eigenvalues()(i), mass * v * v);
    }
    // Symmetrize so that odd moments vanish exactly.
    for (int i = 0; i < n / 2; ++i) {
        const double x = 0.5 * (nw[n - 1 - i].first - nw[i].first);
        const double w = 0.5 * (nw[n - 1 - i].second + nw[i].second);
        nw[i] = {-x, w};
        nw[n - 1 - i] = {x, w};
    }
    if (n % 2 == 1) nw[n / 2].first = 0.0;
    for (const auto& [x, w] : nw) {
        rule.nodes.push_back(x);
        rule.weights.push_back(w);
    }
    return rule;
}

const QuadratureRule& cached_rule(int n, bool hermite) {
    static std::mutex mutex;
    static std::map<std::pair<int, bool>, std::unique_ptr<QuadratureRule>> cache;
    if (n < 1) throw std::invalid_argument("quadrature needs at least one node");
    std::lock_guard<std::mutex> lock(mutex);
    auto& slot = cache[{n, hermite}];
    if (!slot) slot = std::make_unique<QuadratureRule>(jacobi_rule(n, hermite));
    return *slot;
}

}  // namespace

const QuadratureRule& gauss_hermite_rule(int n) { return cached_rule(n, true); }
const QuadratureRule& gauss_legendre_rule(int n) { return cached_rule(n, false); }

MomentCache::MomentCache(const ActivationModel& model, Eigen::MatrixXd cov, MomentOptions options)
    : model_(model), cov_(std::move(cov)), options_(options) {}

std::vector<int> MomentCache::key_of(const MomentQuery& q) {
    std::vector<std::pair<int, int>> f;
    for (const auto& x : q.factors) f.emplace_back(x.var, x.order);
    std::sort(f.begin(), f.end());
    std::vector<int> p = q.partials, w = q.z_weights;
    std::sort(p.begin(), p.end());
    std::sort(w.begin(), w.end());
    std::vector<int> key{static_cast<int>(f.size())};
    for (const auto& [v, o] : f) {
        key.push_back(v);
        key.push_back(o);
    }
    key.push_back(static_cast<int>(p.size()));
    key.insert(key.end(), p.begin(), p.end());
    key.push_back(static_cast<int>(w.size()));
    key.insert(key.end(), w.begin(), w.end());
    return key;
}

double MomentCache::get(const MomentQuery& query) {
    const auto key = key_of(query);
    {
        std::lock_guard<std::mutex> lock(mutex_);
        if (auto it = values_.find(key); it != values_.end()) return it->second;
        if (recording_) {
            pending_.emplace(key, query);
            return 0.0;
        }
    }
    const double v = expect_partial_product(model_, query, cov_, options_);
    std::lock_guard<std::mutex> lock(mutex_);
    values_.emplace(key, v);
    return v;
}

void MomentCache::request(const MomentQuery& query) {
    const auto key = key_of(query);
    std::lock_guard<std::mutex> lock(mutex_);
    if (!values_.count(key)) pending_.emplace(key, query);
}

void MomentCache::evaluate_pending() {
    std::vector<std::pair<std::vector<int>, MomentQuery>> work;
    {
        std::lock_guard<std::mutex> lock(mutex_);
        work.assign(pending_.begin(), pending_.end());
        pending_.clear();
    }
    std::vector<double> out(work.size());
    std::exception_ptr failure;
    const long n = static_cast<long>(work.size());
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < n; ++i) {
        try {
            out[i] = expect_partial_product(model_, work[i].second, cov_, options_);
        } catch (...) {
#pragma omp critical
            if (!failure) failure = std::current_exception();
        }
    }
    if (failure) std::rethrow_exception(failure);
    std::lock_guard<std::mutex> lock(mutex_);
    for (std::size_t i = 0; i < work.size(); ++i) values_.emplace(work[i].first, out[i]);
}

std::size_t MomentCache::size() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return values_.size();
}

}  // namespace ntkorders
