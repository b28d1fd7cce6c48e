#include "ntkorders/finite_width.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

#include "ntkorders/errors.hpp"

namespace ntkorders {

TensorState init_tensors(int m) {
    if (m < 1) throw std::invalid_argument("tensor state needs at least one input");
    TensorState s;
    s.layer = 1;
    s.m = m;
    for (auto* t : {&s.V4, &s.D, &s.F, &s.A, &s.B, &s.P, &s.Q, &s.R, &s.S, &s.T, &s.U}) *t = Tensor4(m);
    s.K1 = Eigen::MatrixXd::Zero(m, m);
    s.Theta1 = Eigen::MatrixXd::Zero(m, m);
    return s;
}

TensorState init_tensors(const InputSet& inputs) { return init_tensors(inputs.size()); }

namespace {

using Idx = std::vector<int>;

Idx uniq(int a, int b) { return a == b ? Idx{a} : Idx{a, b}; }

// Thin accessor that turns factor/partial lists into cached moment lookups.
struct Expect {
    MomentCache& cache;
    double operator()(std::vector<Factor> f, std::vector<int> p = {}) const {
        return cache.get(MomentQuery{std::move(f), std::move(p), {}});
    }
};

Factor s0(int v) { return {v, 0}; }
Factor s1(int v) { return {v, 1}; }
Factor s2(int v) { return {v, 2}; }
Factor s3(int v) { return {v, 3}; }

// Runs body once to record the moments it needs, evaluates them in parallel, then runs it again.
template <typename Body>
void two_pass(MomentCache& cache, const std::string& stage, Body&& body) {
    cache.set_recording(true);
    body();
    cache.set_recording(false);
    try {
        cache.evaluate_pending();
        body();
    } catch (const NumericalError& e) {
        throw NumericalError(stage, e.what());
    }
}

using Perm = std::array<int, 4>;

// Average t over the group generated by index permutations; returns the pre-averaging violation.
double symmetrize(Tensor4& t, const std::vector<Perm>& group) {
    const int m = t.m;
    Tensor4 out(m);
    double scale = 0.0, viol = 0.0;
    for (double v : t.data) scale = std::max(scale, std::abs(v));
    std::array<int, 4> i{}, j{};
    for (i[0] = 0; i[0] < m; ++i[0])
        for (i[1] = 0; i[1] < m; ++i[1])
            for (i[2] = 0; i[2] < m; ++i[2])
                for (i[3] = 0; i[3] < m; ++i[3]) {
                    double sum = 0.0;
                    const double base = t(i[0], i[1], i[2], i[3]);
                    for (const auto& g : group) {
                        for (int k = 0; k < 4; ++k) j[k] = i[g[k]];
                        const double v = t(j[0], j[1], j[2], j[3]);
                        viol = std::max(viol, std::abs(v - base));
                        sum += v;
                    }
                    out(i[0], i[1], i[2], i[3]) = sum / static_cast<double>(group.size());
                }
    t = std::move(out);
    return scale > 0.0 ? viol / scale : 0.0;
}

const std::vector<Perm>& v4_group() {
    static const std::vector<Perm> g{{0, 1, 2, 3}, {1, 0, 2, 3}, {0, 1, 3, 2}, {1, 0, 3, 2},
                                     {2, 3, 0, 1}, {3, 2, 0, 1}, {2, 3, 1, 0}, {3, 2, 1, 0}};
    return g;
}
const std::vector<Perm>& d_group() {
    static const std::vector<Perm> g{{0, 1, 2, 3}, {1, 0, 2, 3}, {0, 1, 3, 2}, {1, 0, 3, 2}};
    return g;
}
const std::vector<Perm>& b_group() {
    static const std::vector<Perm> g{{0, 1, 2, 3}, {1, 0, 3, 2}, {2, 3, 0, 1}, {3, 2, 1, 0}};
    return g;
}
const std::vector<Perm>& f_group() {
    static const std::vector<Perm> g{{0, 1, 2, 3}, {2, 3, 0, 1}};
    return g;
}

constexpr double kSymmetryTolerance = 1e-6;

void enforce(Tensor4& t, const std::vector<Perm>& group, const char* name, int layer) {
    const double v = symmetrize(t, group);
    if (v > kSymmetryTolerance)
        throw NumericalError(std::string(name) + " recursion layer " + std::to_string(layer),
                             "symmetry violated by " + std::to_string(v));
}

template <typename F>
void for_each_index(int m, F&& f) {
    for (int a = 0; a < m; ++a)
        for (int b = 0; b < m; ++b)
            for (int c = 0; c < m; ++c)
                for (int d = 0; d < m; ++d) f(a, b, c, d);
}

void check_state(const TensorState& cur, const KernelState& k) {
    if (cur.layer != k.layer) throw std::invalid_argument("tensor and kernel states are at different layers");
    if (cur.m != k.K.rows()) throw std::invalid_argument("tensor and kernel states disagree on the input count");
}

void require_smooth(const ActivationModel& model, const char* what) {
    if (model.kinked())
        throw UnsupportedDerivative(std::string(what) + " needs pointwise second derivatives; " + model.name() +
                                    " is kinked");
}

}  // namespace

void step_leading_tensors(const TensorState& cur, const KernelState& k, const ActivationModel& model, double cw,
                          TensorState& next, const StepOptions& options) {
    check_state(cur, k);
    const int m = cur.m;
    const double C = cw, r = options.width_ratio;
    const auto& Th = k.Theta;
    MomentCache cache(model, k.K, options.moments);
    Expect E{cache};
    Tensor4 V4(m), D(m), F(m), A(m), B(m);

    // Second-derivative moments of sigma_a sigma_b and Omega_ab, indexed by (a, b, beta1, beta2).
    auto d2ss = [&](int a, int b, int g, int h) { return E({s0(a), s0(b)}, {g, h}); };
    auto d2pp = [&](int a, int b, int g, int h) { return E({s1(a), s1(b)}, {g, h}); };
    auto d2om = [&](int a, int b, int g, int h) { return C * d2ss(a, b, g, h) + C * Th(a, b) * d2pp(a, b, g, h); };
    auto pp = [&](int a, int b) { return E({s1(a), s1(b)}); };
    auto ss = [&](int a, int b) { return E({s0(a), s0(b)}); };
    auto om = [&](int a, int b) { return C * ss(a, b) + C * Th(a, b) * pp(a, b); };
    // <Omega_ab Omega_cd> expanded into four-point moments.
    auto omom = [&](int a, int b, int c, int d) {
        return C * C *
               (E({s0(a), s0(b), s0(c), s0(d)}) + Th(c, d) * E({s0(a), s0(b), s1(c), s1(d)}) +
                Th(a, b) * E({s1(a), s1(b), s0(c), s0(d)}) +
                Th(a, b) * Th(c, d) * E({s1(a), s1(b), s1(c), s1(d)}));
    };

    auto body = [&] {
        for_each_index(m, [&](int a, int b, int c, int d) {
            const Idx uab = uniq(a, b), ucd = uniq(c, d);

            double v = C * C * (E({s0(a), s0(b), s0(c), s0(d)}) - ss(a, b) * ss(c, d));
            double vt = 0.0;
            for (int b1 : uab)
                for (int b2 : uab)
                    for (int b3 : ucd)
                        for (int b4 : ucd) vt += d2ss(a, b, b1, b2) * d2ss(c, d, b3, b4) * cur.V4(b1, b2, b3, b4);
            V4(a, b, c, d) = v + r * C * C / 4.0 * vt;

            double dv = C * (C * (E({s0(a), s0(b), s0(c), s0(d)}) + Th(c, d) * E({s0(a), s0(b), s1(c), s1(d)})) -
                             ss(a, b) * om(c, d));
            double dt1 = 0.0, dt2 = 0.0;
            for (int b1 : uab)
                for (int b2 : uab) {
                    for (int b3 : ucd)
                        for (int b4 : ucd) dt1 += d2ss(a, b, b1, b2) * d2om(c, d, b3, b4) * cur.V4(b1, b2, b3, b4);
                    dt2 += d2ss(a, b, b1, b2) * cur.D(b1, b2, c, d);
                }
            D(a, b, c, d) = dv + r * C / 4.0 * dt1 + r * C * C / 2.0 * pp(c, d) * dt2;

            // F(p0,p1,p2,p3): preactivations p0, p2 and NTK pair (p1, p3).
            double fv = C * C * E({s0(a), s0(c), s1(b), s1(d)}) * Th(b, d);
            double ft = 0.0;
            for (int g : uniq(a, b)) {
                const double lg = E({s0(a), s1(b)}, {g});
                for (int h : uniq(c, d)) ft += lg * E({s0(c), s1(d)}, {h}) * cur.F(g, b, h, d);
            }
            F(a, b, c, d) = fv + r * C * C * ft;

            double av = omom(a, b, c, d) - om(a, b) * om(c, d);
            double at1 = 0.0, at2 = 0.0, at3 = 0.0;
            for (int b1 : uab)
                for (int b2 : uab) {
                    for (int b3 : ucd)
                        for (int b4 : ucd) at1 += d2om(a, b, b1, b2) * d2om(c, d, b3, b4) * cur.V4(b1, b2, b3, b4);
                    at2 += d2om(a, b, b1, b2) * cur.D(b1, b2, c, d);
                }
            for (int b3 : ucd)
                for (int b4 : ucd) at3 += d2om(c, d, b3, b4) * cur.D(b3, b4, a, b);
            A(a, b, c, d) = av + r / 4.0 * at1 + r * C / 2.0 * (pp(c, d) * at2 + pp(a, b) * at3) +
                            r * C * C * pp(a, b) * pp(c, d) * cur.A(a, b, c, d);

            // B(p0,p1,p2,p3): NTK pairs (p0,p2) and (p1,p3).
            B(a, b, c, d) = C * C * Th(a, c) * Th(b, d) * E({s1(a), s1(b), s1(c), s1(d)}) +
                            r * C * C * pp(a, b) * pp(c, d) * cur.B(a, b, c, d);
        });
    };
    two_pass(cache, "tensor recursion layer " + std::to_string(cur.layer + 1), body);

    const int layer = cur.layer + 1;
    enforce(V4, v4_group(), "V4", layer);
    enforce(D, d_group(), "D", layer);
    enforce(F, f_group(), "F", layer);
    enforce(A, v4_group(), "A", layer);
    enforce(B, b_group(), "B", layer);
    next.layer = layer;
    next.m = m;
    next.V4 = std::move(V4);
    next.D = std::move(D);
    next.F = std::move(F);
    next.A = std::move(A);
    next.B = std::move(B);
}

void step_mean_corrections(const TensorState& cur, const KernelState& k, const ActivationModel& model, double cw,
                           TensorState& next, const StepOptions& options) {
    check_state(cur, k);
    const int m = cur.m;
    const double C = cw, r = options.width_ratio;
    const auto& Th = k.Theta;
    MomentCache cache(model, k.K, options.moments);
    Expect E{cache};
    Eigen::MatrixXd K1(m, m), Theta1(m, m);

    auto body = [&] {
        for (int a = 0; a < m; ++a)
            for (int b = 0; b < m; ++b) {
                const Idx u = uniq(a, b);
                double k2 = 0.0, k4 = 0.0, t2 = 0.0, t4 = 0.0, td = 0.0, tf = 0.0;
                for (int b1 : u)
                    for (int b2 : u) {
                        const double ss2 = E({s0(a), s0(b)}, {b1, b2});
                        const double pp2 = E({s1(a), s1(b)}, {b1, b2});
                        k2 += cur.K1(b1, b2) * ss2;
                        t2 += cur.K1(b1, b2) * (C * ss2 + C * Th(a, b) * pp2);
                        td += pp2 * cur.D(b1, b2, a, b);
                        tf += pp2 * cur.F(b1, a, b2, b);
                        for (int b3 : u)
                            for (int b4 : u) {
                                const double ss4 = E({s0(a), s0(b)}, {b1, b2, b3, b4});
                                const double pp4 = E({s1(a), s1(b)}, {b1, b2, b3, b4});
                                k4 += cur.V4(b1, b2, b3, b4) * ss4;
                                t4 += cur.V4(b1, b2, b3, b4) * (C * ss4 + C * Th(a, b) * pp4);
                            }
                    }
                K1(a, b) = r * C * (0.5 * k2 + 0.125 * k4);
                Theta1(a, b) = r * (C * E({s1(a), s1(b)}) * cur.Theta1(a, b) + 0.5 * t2 + 0.125 * t4 +
                                    0.5 * C * td + C * tf);
            }
    };
    two_pass(cache, "mean correction layer " + std::to_string(cur.layer + 1), body);

    next.layer = cur.layer + 1;
    next.m = m;
    next.K1 = 0.5 * (K1 + K1.transpose());
    next.Theta1 = 0.5 * (Theta1 + Theta1.transpose());
}

void step_dntk_tensors(const TensorState& cur, const KernelState& k, const ActivationModel& model, double cw,
                       TensorState& next, const StepOptions& options) {
    check_state(cur, k);
    require_smooth(model, "dNTK recursion");
    if (next.layer != cur.layer + 1 || next.F.m != cur.m)
        throw std::logic_error("dNTK step needs the next-layer F tensor");
    const int m = cur.m;
    const double C = cw, r = options.width_ratio;
    const auto& Th = k.Theta;
    MomentCache cache(model, k.K, options.moments);
    Expect E{cache};
    Tensor4 P(m), Q(m);

    auto body = [&] {
        for_each_index(m, [&](int p0, int p1, int p2, int p3) {
            const double pp12 = E({s1(p1), s1(p2)});
            double pt = 0.0;
            for (int b : uniq(p0, p3)) pt += E({s1(p0), s0(p3)}, {b}) * cur.P(p0, p1, p2, b);
            P(p0, p1, p2, p3) = C * C * Th(p0, p1) * Th(p0, p2) * E({s1(p1), s1(p2), s2(p0), s0(p3)}) +
                                r * C * C * pp12 * E({s2(p0), s0(p3)}) * cur.B(p0, p0, p1, p2) +
                                r * C * C * pp12 * pt;

            double qf = 0.0;
            for (int l1 : uniq(p0, p1)) {
                const double g = E({s2(p0), s1(p1)}, {l1});
                for (int l3 : uniq(p2, p3)) qf += g * E({s1(p2), s0(p3)}, {l3}) * cur.F(l1, p0, l3, p2);
            }
            double qt = 0.0;
            for (int b : uniq(p2, p3)) qt += E({s1(p2), s0(p3)}, {b}) * cur.Q(p0, p1, p2, b);
            Q(p0, p1, p2, p3) = next.F(p1, p0, p3, p2) +
                                C * C * Th(p0, p1) * Th(p0, p2) * E({s2(p0), s1(p1), s1(p2), s0(p3)}) +
                                r * C * C * Th(p0, p1) * qf + r * C * C * E({s1(p0), s1(p1)}) * qt;
        });
    };
    two_pass(cache, "dNTK recursion layer " + std::to_string(cur.layer + 1), body);
    next.P = std::move(P);
    next.Q = std::move(Q);
}

void step_ddntk_tensors(const TensorState& cur, const KernelState& k, const ActivationModel& model, double cw,
                        TensorState& next, const StepOptions& options) {
    check_state(cur, k);
    require_smooth(model, "ddNTK recursion");
    const int m = cur.m;
    const double C2 = cw * cw, r = options.width_ratio;
    const auto& Th = k.Theta;
    MomentCache cache(model, k.K, options.moments);
    Expect E{cache};
    Tensor4 R(m), S(m), T(m), U(m);

    auto body = [&] {
        for_each_index(m, [&](int p0, int p1, int p2, int p3) {
            // R(0,1,2,3)
            {
                const int x0 = p0, x1 = p1, x2 = p2, x3 = p3;
                const double pp23 = E({s1(x2), s1(x3)});
                double l1 = 0.0, l2 = 0.0;
                for (int l : uniq(x0, x1)) {
                    l1 += E({s1(x0), s0(x1)}, {l}) * cur.P(x0, x2, x3, l);
                    l2 += E({s2(x0), s0(x1)}, {l}) * cur.P(x0, x2, x3, l);
                }
                R(p0, p1, p2, p3) =
                    C2 * Th(x0, x2) * Th(x0, x3) * E({s2(x0), s0(x1), s1(x2), s1(x3)}) +
                    r * C2 * E({s2(x0), s0(x1)}) * pp23 * cur.B(x0, x0, x2, x3) + r * C2 * pp23 * l1 +
                    C2 * Th(x0, x1) * Th(x0, x2) * Th(x0, x3) * E({s3(x0), s0(x1), s1(x2), s1(x3)}) +
                    r * C2 * Th(x0, x1) * E({s3(x0), s0(x1)}) * pp23 * cur.B(x0, x0, x2, x3) +
                    r * C2 * Th(x0, x1) * pp23 * l2 + r * C2 * E({s1(x0), s1(x1)}) * pp23 * cur.R(p0, p1, p2, p3);
            }
            // S(1,2,3,4)
            {
                const int x1 = p0, x2 = p1, x3 = p2, x4 = p3;
                const double pp12 = E({s1(x1), s1(x2)}), pp34 = E({s1(x3), s1(x4)});
                S(p0, p1, p2, p3) =
                    C2 * E({s1(x1), s1(x2), s1(x3), s1(x4)}) * Th(x1, x3) * Th(x2, x4) +
                    r * C2 * pp12 * pp34 * cur.B(x1, x2, x3, x4) +
                    C2 * Th(x1, x2) * Th(x1, x3) * Th(x2, x4) * E({s2(x1), s2(x2), s1(x3), s1(x4)}) +
                    r * C2 * Th(x1, x2) * E({s2(x1), s2(x2)}) * pp34 * cur.B(x1, x2, x3, x4) +
                    r * C2 * pp12 * pp34 * cur.S(p0, p1, p2, p3);
            }
            // T(1,3,2,4)
            {
                const int x1 = p0, x3 = p1, x2 = p2, x4 = p3;
                const Idx u13 = uniq(x1, x3), u24 = uniq(x2, x4);
                const double pp13 = E({s1(x1), s1(x3)}), pp24 = E({s1(x2), s1(x4)});
                double f_a = 0.0, f_b = 0.0, f_c = 0.0, f_d = 0.0;
                for (int l3 : u13)
                    for (int l4 : u24) {
                        const double a13 = E({s1(x1), s0(x3)}, {l3}), b13 = E({s2(x1), s1(x3)}, {l3});
                        const double a24 = E({s1(x2), s0(x4)}, {l4}), b24 = E({s2(x2), s1(x4)}, {l4});
                        f_a += a13 * a24 * cur.F(l3, x1, l4, x2);
                        f_b += a13 * b24 * cur.F(l3, x1, l4, x2);
                        f_c += b13 * a24 * cur.F(l4, x2, l3, x1);
                        f_d += b13 * b24 * cur.F(l3, x1, l4, x2);
                    }
                double q_a = 0.0, q_c = 0.0;
                for (int l3 : u13) {
                    q_a += E({s1(x1), s1(x3)}, {l3}) * cur.Q(x2, x4, x1, l3);
                    q_c += E({s2(x1), s1(x3)}, {l3}) * cur.Q(x2, x4, x1, l3);
                }
                double q_b = 0.0, q_d = 0.0;
                for (int l4 : u24) {
                    q_b += E({s1(x2), s1(x4)}, {l4}) * cur.Q(x1, x3, x2, l4);
                    q_d += E({s2(x2), s1(x4)}, {l4}) * cur.Q(x1, x3, x2, l4);
                }
                T(p0, p1, p2, p3) =
                    C2 * (E({s1(x1), s0(x3), s1(x2), s0(x4)}) * Th(x1, x2) + r * f_a +
                          Th(x1, x2) * Th(x2, x4) * E({s1(x1), s0(x3), s2(x2), s1(x4)}) + r * Th(x2, x4) * f_b +
                          r * pp24 * q_a + Th(x1, x2) * Th(x1, x3) * E({s2(x1), s1(x3), s1(x2), s0(x4)}) +
                          r * Th(x1, x3) * f_c + r * pp13 * q_b +
                          Th(x1, x3) * Th(x2, x4) * Th(x1, x2) * E({s2(x1), s1(x3), s2(x2), s1(x4)}) +
                          r * Th(x1, x3) * Th(x2, x4) * f_d + r * Th(x1, x3) * pp24 * q_c +
                          r * Th(x2, x4) * pp13 * q_d + r * pp13 * pp24 * cur.T(p0, p1, p2, p3));
            }
            // U(1,4,2,3)
            {
                const int x1 = p0, x4 = p1, x2 = p2, x3 = p3;
                U(p0, p1, p2, p3) = C2 * Th(x1, x2) * Th(x2, x4) * Th(x1, x3) * E({s2(x1), s1(x4), s2(x2), s1(x3)}) +
                                    r * C2 * E({s1(x1), s1(x4)}) * E({s1(x2), s1(x3)}) * cur.U(p0, p1, p2, p3);
            }
        });
    };
    two_pass(cache, "ddNTK recursion layer " + std::to_string(cur.layer + 1), body);
    next.R = std::move(R);
    next.S = std::move(S);
    next.T = std::move(T);
    next.U = std::move(U);
}

TensorState step_tensors(const TensorState& cur, const KernelState& k, const ActivationModel& model, double cw,
                         const StepOptions& options) {
    TensorState next = init_tensors(cur.m);
    step_leading_tensors(cur, k, model, cw, next, options);
    step_mean_corrections(cur, k, model, cw, next, options);
    if (options.dntk) {
        step_dntk_tensors(cur, k, model, cw, next, options);
        step_ddntk_tensors(cur, k, model, cw, next, options);
    }
    return next;
}

TheoryRun run_theory(const InputSet& inputs, const ActivationModel& model, const std::vector<double>& cw_schedule,
                     bool dntk, const std::vector<int>& widths, const MomentOptions& moments) {
    const std::size_t depth = cw_schedule.size();
    if (!widths.empty() && widths.size() + 1 != depth)
        throw std::invalid_argument("widths must list the hidden widths n_1 .. n_{L-1}");
    TheoryRun run;
    run.kernels = run_kernels(inputs, model, cw_schedule, moments);
    run.tensors.push_back(init_tensors(inputs));
    for (std::size_t l = 1; l < depth; ++l) {
        StepOptions opts;
        opts.dntk = dntk;
        opts.moments = moments;
        // Step from layer l to l+1; transport terms carry n_l / n_{l-1} and vanish at l = 1.
        if (!widths.empty() && l >= 2)
            opts.width_ratio = static_cast<double>(widths[l - 1]) / static_cast<double>(widths[l - 2]);
        run.tensors.push_back(step_tensors(run.tensors.back(), run.kernels[l - 1], model, cw_schedule[l], opts));
    }
    return run;
}

const Tensor4& tensor_of(const TensorState& s, TensorKind kind) {
    switch (kind) {
        case TensorKind::V4: return s.V4;
        case TensorKind::D: return s.D;
        case TensorKind::F: return s.F;
        case TensorKind::A: return s.A;
        case TensorKind::B: return s.B;
        case TensorKind::P: return s.P;
        case TensorKind::Q: return s.Q;
        case TensorKind::R: return s.R;
        case TensorKind::S: return s.S;
        case TensorKind::T: return s.T;
        case TensorKind::U: return s.U;
    }
    throw std::invalid_argument("unknown tensor kind");
}

Tensor4& tensor_of(TensorState& s, TensorKind kind) {
    return const_cast<Tensor4&>(tensor_of(static_cast<const TensorState&>(s), kind));
}

const char* tensor_name(TensorKind kind) {
    static const char* names[] = {"V4", "D", "F", "A", "B", "P", "Q", "R", "S", "T", "U"};
    return names[static_cast<int>(kind)];
}

TensorKind tensor_kind_from_name(const std::string& name) {
    for (int i = 0; i <= static_cast<int>(TensorKind::U); ++i)
        if (name == tensor_name(static_cast<TensorKind>(i))) return static_cast<TensorKind>(i);
    throw std::invalid_argument("unknown tensor '" + name + "'");
}

double perturbation_multiplier(const TensorState& cur, const KernelState& k, const ActivationModel& model, double cw,
                               TensorKind kind, int a, const StepOptions& options) {
    if (a < 0 || a >= cur.m) throw std::invalid_argument("input index out of range");
    const TensorState base = step_tensors(cur, k, model, cw, options);
    TensorState shifted = cur;
    for (double& v : tensor_of(shifted, kind).data) v += 1.0;
    const TensorState next = step_tensors(shifted, k, model, cw, options);
    return tensor_of(next, kind)(a, a, a, a) - tensor_of(base, kind)(a, a, a, a);
}

double symmetry_violation(const TensorState& s) {
    double worst = 0.0;
    auto check = [&](Tensor4 t, const std::vector<Perm>& g) { worst = std::max(worst, symmetrize(t, g)); };
    check(s.V4, v4_group());
    check(s.D, d_group());
    check(s.F, f_group());
    check(s.A, v4_group());
    check(s.B, b_group());
    return worst;
}

ScaleInvarianceReport check_scale_invariant_identities(const ActivationModel& model, const std::vector<double>& K_grid,
                                                      double cw, double theta, const MomentOptions& options) {
    auto moment = [&](double K, int o1, int o2, std::vector<int> weights) {
        Eigen::MatrixXd c(1, 1);
        c(0, 0) = K;
        return expect_product(model, MomentQuery{{{0, o1}, {0, o2}}, {}, std::move(weights)}, c, options);
    };
    auto ss = [&](double K) { return moment(K, 0, 0, {}); };
    auto pp = [&](double K) { return moment(K, 1, 1, {}); };
    auto diff = [](const auto& f, double K, double h) { return (f(K + h) - f(K - h)) / (2.0 * h); };

    ScaleInvarianceReport rep;
    rep.no_on_diagonal_corrections = true;
    for (double K : K_grid) {
        if (!(K > 0.0)) throw std::invalid_argument("kernel grid must be positive");
        const double h = 1e-4 * K;
        // Derivatives of <dOmega> are taken termwise; the identity is linear in the two moments.
        auto domega = [&](double x) { return diff(ss, x, h) + cw * theta * diff(pp, x, h); };
        auto outer = [&](double x) { return 2.0 * x * x * domega(x); };
        const double d1 = domega(K);
        const double eq11 = 2.0 * K * K * diff(outer, K, h) - 8.0 * K * K * K * d1;
        const double ppK = pp(K);
        const double eq9 = moment(K, 1, 1, {0, 0}) - K * ppK;
        const double consistency = eq9 - 2.0 * K * K * diff(pp, K, h);
        const double scale = std::max({1.0, std::abs(8.0 * K * K * K * d1), std::abs(K * ppK)});
        rep.kernels.push_back(K);
        rep.eq11_residuals.push_back(eq11);
        rep.eq9_residuals.push_back(eq9);
        rep.eq9_consistency.push_back(consistency);
        rep.scales.push_back(scale);
        if (!(std::abs(eq11) < 1e-6 * scale && std::abs(eq9) < 1e-6 * scale)) rep.no_on_diagonal_corrections = false;
    }
    return rep;
}

}  // namespace ntkorders
