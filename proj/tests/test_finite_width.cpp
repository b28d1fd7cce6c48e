#include <doctest.h>

#include <cmath>

#include "ntkorders/errors.hpp"
#include "ntkorders/finite_width.hpp"
#include "oracles.hpp"

using namespace ntkorders;

namespace {

InputSet reference_pair() {
    return InputSet(std::vector<std::vector<double>>{{-0.9895229339599609, -0.5992491841316223},
                                                     {-0.17877478897571564, 2.253682851791382}});
}

InputSet reference_four() {
    return InputSet(std::vector<std::vector<double>>{{-0.9895229339599609, -0.5992491841316223},
                                                     {-0.17877478897571564, 2.253682851791382},
                                                     {1.0237634181976318, -0.4618060886859894},
                                                     {-0.5364212393760681, 1.9298086166381836}});
}

}  // namespace

TEST_CASE("second-layer tensors of a relu network") {
    const auto relu = make_activation(ActivationKind::relu);
    const double C = 2.0;
    const auto run = run_theory(reference_pair(), relu, {C, C});
    const auto& k1 = run.kernels[0];
    const auto& t2 = run.tensors[1];
    const double k00 = k1.K(0, 0), k01 = k1.K(0, 1), k11 = k1.K(1, 1);

    // Single input: V4 = C^2 (<s^4> - <s^2>^2) = C^2 K^2 (3/2 - 1/4).
    CHECK(t2.V4(0, 0, 0, 0) == doctest::Approx(C * C * k00 * k00 * 1.25).epsilon(1e-12));

    // V4(0,0,1,1) = C^2 (<s0^2 s1^2> - <s0^2><s1^2>).
    const double s2s2 = oracle::expect_2d(
        [](double a, double b) { return oracle::relu(a) * oracle::relu(a) * oracle::relu(b) * oracle::relu(b); }, k00,
        k01, k11);
    CHECK(t2.V4(0, 0, 1, 1) == doctest::Approx(C * C * (s2s2 - 0.25 * k00 * k11)).epsilon(1e-5));

    // F(0,1,0,1) = C^2 Theta_11 <s0^2 s'1^2>.
    const double f = oracle::expect_2d(
        [](double a, double b) { return oracle::relu(a) * oracle::relu(a) * oracle::step(b); }, k00, k01, k11);
    CHECK(t2.F(0, 1, 0, 1) == doctest::Approx(C * C * k1.Theta(1, 1) * f).epsilon(1e-4));

    // B(0,0,1,1) pairs NTK indices (0,1) twice: C^2 Theta_01^2 P(z0 > 0, z1 > 0).
    const double rho = k01 / std::sqrt(k00 * k11);
    const double orth = 0.25 + std::asin(rho) / (2 * M_PI);
    CHECK(t2.B(0, 0, 1, 1) == doctest::Approx(C * C * k1.Theta(0, 1) * k1.Theta(0, 1) * orth).epsilon(1e-12));
}

TEST_CASE("identity network: second-layer tensors follow Wick contractions") {
    const auto id = make_activation(ActivationKind::identity);
    const double C = 1.3;
    const auto x = reference_pair();
    const auto run = run_theory(x, id, {C, C}, true);
    const auto& K = run.kernels[0].K;
    const auto& T = run.kernels[0].Theta;
    const auto& t2 = run.tensors[1];
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 2; ++c)
                for (int d = 0; d < 2; ++d) {
                    CHECK(t2.V4(a, b, c, d) == doctest::Approx(C * C * (K(a, c) * K(b, d) + K(a, d) * K(b, c))));
                    CHECK(t2.B(a, b, c, d) == doctest::Approx(C * C * T(a, c) * T(b, d)));
                    CHECK(t2.F(a, b, c, d) == doctest::Approx(C * C * K(a, c) * T(b, d)));
                    CHECK(t2.P(a, b, c, d) == 0.0);
                    CHECK(t2.R(a, b, c, d) == 0.0);
                }
}

TEST_CASE("scale-invariant diagonals receive no mean corrections") {
    for (const auto& act : {make_activation(ActivationKind::relu), make_activation(ActivationKind::leaky_relu, 0.1)}) {
        const double cw = critical_point(act).cw;
        const auto run = run_theory(reference_pair(), act, std::vector<double>(12, cw));
        for (const auto& t : run.tensors) {
            const double scale = std::max(1.0, t.Theta1.cwiseAbs().maxCoeff());
            CHECK(std::abs(t.K1(0, 0)) < 1e-12 * scale);
            CHECK(std::abs(t.Theta1(1, 1)) < 1e-12 * scale);
        }
        CHECK(std::abs(run.tensors.back().K1(0, 1)) > 1e-3);
    }
    const auto gelu = make_activation(ActivationKind::gelu);
    const auto g = run_theory(reference_pair().scaled(0.53), gelu, std::vector<double>(4, 1.98305826));
    CHECK(std::abs(g.tensors.back().K1(0, 0)) > 1e-2);
}

TEST_CASE("tensor symmetries") {
    const auto gelu = make_activation(ActivationKind::gelu);
    const auto run = run_theory(reference_four(), gelu, std::vector<double>(4, 1.7), true);
    for (const auto& t : run.tensors) CHECK(symmetry_violation(t) < 1e-12);
    const auto& t = run.tensors.back();
    CHECK(t.V4(0, 1, 2, 3) == doctest::Approx(t.V4(2, 3, 1, 0)));
    CHECK(t.D(0, 1, 2, 3) == doctest::Approx(t.D(1, 0, 3, 2)));
    CHECK(t.B(0, 1, 2, 3) == doctest::Approx(t.B(1, 0, 3, 2)));
}

TEST_CASE("kinked activations have no dNTK recursions") {
    const auto relu = make_activation(ActivationKind::relu);
    CHECK_THROWS_AS(run_theory(reference_pair(), relu, {2.0, 2.0, 2.0}, true), UnsupportedDerivative);
}

TEST_CASE("dNTK and ddNTK tensors restrict consistently to one input") {
    const auto gelu = make_activation(ActivationKind::gelu);
    const auto one = run_theory(reference_pair().subset({1}), gelu, {1.8, 1.8, 1.8}, true);
    const auto many = run_theory(reference_pair(), gelu, {1.8, 1.8, 1.8}, true);
    for (auto kind : {TensorKind::P, TensorKind::Q, TensorKind::R, TensorKind::S, TensorKind::T, TensorKind::U})
        CHECK(tensor_of(one.tensors[2], kind)(0, 0, 0, 0) ==
              doctest::Approx(tensor_of(many.tensors[2], kind)(1, 1, 1, 1)).epsilon(1e-10));
}

TEST_CASE("perturbation multipliers at relu criticality") {
    const auto relu = make_activation(ActivationKind::relu);
    const auto run = run_theory(reference_pair().subset({0}), relu, std::vector<double>(4, 2.0));
    for (auto kind : {TensorKind::F, TensorKind::D, TensorKind::A, TensorKind::B})
        CHECK(perturbation_multiplier(run.tensors[2], run.kernels[2], relu, 2.0, kind) ==
              doctest::Approx(1.0).epsilon(1e-9));
    // Off criticality the multiplier moves away from one.
    CHECK(perturbation_multiplier(run.tensors[2], run.kernels[2], relu, 2.5, TensorKind::A) == doctest::Approx(1.5625));
}

TEST_CASE("scale-invariance identities") {
    const std::vector<double> grid = {0.5, 1.0, 3.0};
    for (const auto& act : {make_activation(ActivationKind::relu), make_activation(ActivationKind::leaky_relu, 0.1)}) {
        const auto rep = check_scale_invariant_identities(act, grid);
        CHECK(rep.no_on_diagonal_corrections);
        for (std::size_t i = 0; i < grid.size(); ++i) {
            CHECK(std::abs(rep.eq11_residuals[i]) < 1e-6 * rep.scales[i]);
            CHECK(std::abs(rep.eq9_residuals[i]) < 1e-12);
        }
    }
    const auto rep = check_scale_invariant_identities(make_activation(ActivationKind::gelu), {1.0});
    CHECK_FALSE(rep.no_on_diagonal_corrections);
    CHECK(std::abs(rep.eq9_residuals[0]) > 1e-3);
    CHECK(std::abs(rep.eq9_consistency[0]) < 1e-6);
}
