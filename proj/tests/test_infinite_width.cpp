#include <doctest.h>

#include <cmath>

#include "ntkorders/errors.hpp"
#include "ntkorders/infinite_width.hpp"
#include "oracles.hpp"

using namespace ntkorders;

namespace {

InputSet reference_pair() {
    return InputSet(std::vector<std::vector<double>>{{-0.9895229339599609, -0.5992491841316223},
                                                     {-0.17877478897571564, 2.253682851791382}});
}

}  // namespace

TEST_CASE("first layer kernels") {
    const auto x = reference_pair();
    const auto s = init_kernels(x, 2.0, 2);
    CHECK(s.K(0, 1) == doctest::Approx(2.0 * x.matrix().row(0).dot(x.matrix().row(1)) / 2.0));
    CHECK((s.Theta - s.K).cwiseAbs().maxCoeff() == 0.0);
    CHECK_THROWS_AS(init_kernels(x, 2.0, 3), std::invalid_argument);
}

TEST_CASE("relu kernel step matches the arc-cosine formula") {
    const auto relu = make_activation(ActivationKind::relu);
    const auto s1 = init_kernels(reference_pair(), 2.0, 2);
    const auto s2 = step_kernels(s1, relu, 2.0);
    const double k00 = s1.K(0, 0), k11 = s1.K(1, 1), k01 = s1.K(0, 1);
    const double t = std::acos(k01 / std::sqrt(k00 * k11));
    const double arc = std::sqrt(k00 * k11) / (2 * M_PI) * (std::sin(t) + (M_PI - t) * std::cos(t));
    CHECK(s2.K(0, 1) == doctest::Approx(2.0 * arc).epsilon(1e-13));
    CHECK(s2.K(0, 0) == doctest::Approx(k00).epsilon(1e-14));
    // Theta' = C <s's'> Theta + K'.
    const double pp = (M_PI - t) / (2 * M_PI);
    CHECK(s2.Theta(0, 1) == doctest::Approx(2.0 * pp * s1.Theta(0, 1) + s2.K(0, 1)).epsilon(1e-13));
}

TEST_CASE("gelu kernel step against a brute-force grid") {
    const auto gelu = make_activation(ActivationKind::gelu);
    const auto s1 = init_kernels(reference_pair(), 1.5, 2);
    const auto s2 = step_kernels(s1, gelu, 1.5);
    const double grid = oracle::expect_2d([](double a, double b) { return oracle::gelu(a) * oracle::gelu(b); },
                                          s1.K(0, 0), s1.K(0, 1), s1.K(1, 1));
    CHECK(s2.K(0, 1) == doctest::Approx(1.5 * grid).epsilon(1e-6));
}

TEST_CASE("relu criticality: constant diagonal kernel and linear NTK") {
    const auto relu = make_activation(ActivationKind::relu);
    const auto run = run_kernels(reference_pair(), relu, std::vector<double>(30, 2.0));
    const double k1 = run[0].K(0, 0);
    for (int l = 1; l <= 30; ++l) {
        CHECK(run[l - 1].K(0, 0) == doctest::Approx(k1).epsilon(1e-12));
        CHECK(run[l - 1].Theta(0, 0) == doctest::Approx(l * k1).epsilon(1e-12));
    }
    // Off criticality each layer multiplies the diagonal kernel by C_W / 2.
    const auto hot = run_kernels(reference_pair(), relu, std::vector<double>(10, 2.5));
    for (int l = 2; l <= 10; ++l) CHECK(hot[l - 1].K(1, 1) / hot[l - 2].K(1, 1) == doctest::Approx(1.25).epsilon(1e-13));
}

TEST_CASE("critical points") {
    CHECK(critical_point(make_activation(ActivationKind::relu)).cw == doctest::Approx(2.0));
    CHECK(critical_point(make_activation(ActivationKind::leaky_relu, 0.1)).cw == doctest::Approx(2.0 / 1.01));
    CHECK(critical_point(make_activation(ActivationKind::identity)).cw == doctest::Approx(1.0));
    // tanh: K* = 0 with C_W = 1 / sigma'(0)^2.
    const auto tp = critical_point(make_activation(ActivationKind::tanh));
    CHECK(tp.cw == doctest::Approx(1.0).epsilon(1e-8));
    CHECK(critical_cw(make_activation(ActivationKind::relu), reference_pair()) == doctest::Approx(2.0));
}

TEST_CASE("susceptibilities at relu criticality") {
    const auto relu = make_activation(ActivationKind::relu);
    const auto s = init_kernels(reference_pair(), 2.0, 2);
    const auto chi = susceptibilities(s, relu, 2.0);
    CHECK(chi.chi_perp(0, 0) == doctest::Approx(1.0));
    CHECK(chi.chi_perp(1, 1) == doctest::Approx(1.0));
    CHECK(chi.chi_perp(0, 1) < 1.0);
    const auto circ = chi_circ_delta_expansion(s, relu, 2.0);
    CHECK(circ.size() == 8);
}
