#include <doctest.h>

#include <cmath>

#include "ntkorders/errors.hpp"
#include "ntkorders/gaussian_moments.hpp"
#include "oracles.hpp"

using namespace ntkorders;

namespace {

Eigen::MatrixXd cov2(double k11, double k12, double k22) {
    Eigen::MatrixXd c(2, 2);
    c << k11, k12, k12, k22;
    return c;
}

MomentQuery pair_query(int o1, int o2, std::vector<int> weights = {}) {
    return MomentQuery{{{0, o1}, {1, o2}}, {}, std::move(weights)};
}

}  // namespace

TEST_CASE("relu two-point moment against a brute-force grid") {
    const auto relu = make_activation(ActivationKind::relu);
    // Unit variances, zero correlation: E[relu(z1) relu(z2)] = 1 / (2 pi).
    const double v = expect_product(relu, pair_query(0, 0), cov2(1, 0, 1));
    CHECK(v == doctest::Approx(1.0 / (2.0 * M_PI)).epsilon(1e-12));
    for (double rho : {-0.8, -0.3, 0.5, 0.9}) {
        const double k11 = 1.7, k22 = 0.6, k12 = rho * std::sqrt(k11 * k22);
        const double lib = expect_product(relu, pair_query(0, 0), cov2(k11, k12, k22));
        const double grid = oracle::expect_2d([](double a, double b) { return oracle::relu(a) * oracle::relu(b); },
                                              k11, k12, k22);
        CHECK(lib == doctest::Approx(grid).epsilon(1e-5));
        const double lib_d = expect_product(relu, pair_query(1, 1), cov2(k11, k12, k22));
        // P(z1 > 0, z2 > 0) = 1/4 + asin(rho) / (2 pi).
        CHECK(lib_d == doctest::Approx(0.25 + std::asin(rho) / (2.0 * M_PI)).epsilon(1e-12));
    }
}

TEST_CASE("closed forms agree with quadrature for kinked activations") {
    MomentOptions quad;
    quad.use_closed_forms = false;
    for (const auto& act : {make_activation(ActivationKind::relu), make_activation(ActivationKind::leaky_relu, 0.1)}) {
        for (double rho : {-0.95, -0.4, 0.0, 0.7, 0.95}) {
            for (double k11 : {0.1, 2.0, 10.0}) {
                const double k22 = 1.3, k12 = rho * std::sqrt(k11 * k22);
                for (auto [o1, o2] : {std::pair{0, 0}, std::pair{0, 1}, std::pair{1, 1}}) {
                    const auto q = pair_query(o1, o2);
                    const auto closed = scale_invariant_closed_form(act, q, cov2(k11, k12, k22));
                    REQUIRE(closed.has_value());
                    CHECK(*closed == doctest::Approx(expect_product(act, q, cov2(k11, k12, k22), quad)).epsilon(1e-9));
                }
            }
        }
    }
}

TEST_CASE("gelu one-point moments against a brute-force grid") {
    const auto gelu = make_activation(ActivationKind::gelu);
    Eigen::MatrixXd c(1, 1);
    c(0, 0) = 1.0;
    const double lib = expect_product(gelu, MomentQuery{{{0, 0}, {0, 0}}, {}, {}}, c);
    const double grid = oracle::expect_1d([](double z) { return oracle::gelu(z) * oracle::gelu(z); }, 1.0);
    CHECK(lib == doctest::Approx(grid).epsilon(1e-10));
    // E[gelu(z)^2] at unit variance from a 30-digit adaptive quadrature.
    CHECK(lib == doctest::Approx(0.42522148257029867).epsilon(1e-9));
}

TEST_CASE("stein identity") {
    for (const auto& act : {make_activation(ActivationKind::relu), make_activation(ActivationKind::gelu)}) {
        const auto c = cov2(1.4, 0.5, 0.9);
        // E[z_0 s(z_0) s(z_1)] = K_00 E[s'(z_0) s(z_1)] + K_01 E[s(z_0) s'(z_1)].
        const double lhs = expect_product(act, pair_query(0, 0, {0}), c);
        const double rhs = 1.4 * expect_product(act, pair_query(1, 0), c) + 0.5 * expect_product(act, pair_query(0, 1), c);
        CHECK(std::abs(lhs - rhs) < 1e-8);
        // The derivative route through expect_partial_product.
        const double partial = expect_partial_product(act, MomentQuery{{{0, 0}, {1, 0}}, {0}, {}}, c);
        CHECK(partial == doctest::Approx(expect_product(act, pair_query(1, 0), c)).epsilon(1e-9));
    }
}

TEST_CASE("orthant probabilities and gram inverse") {
    for (double rho : {-0.6, 0.0, 0.3}) {
        CHECK(orthant_probability(cov2(1, rho, 1)) == doctest::Approx(0.25 + std::asin(rho) / (2 * M_PI)).epsilon(1e-12));
    }
    Eigen::MatrixXd c3(3, 3);
    c3 << 1, 0.2, 0.1, 0.2, 1, 0.3, 0.1, 0.3, 1;
    // 1/8 + (asin r12 + asin r13 + asin r23) / (4 pi).
    const double expect3 = 0.125 + (std::asin(0.2) + std::asin(0.1) + std::asin(0.3)) / (4 * M_PI);
    CHECK(orthant_probability(c3) == doctest::Approx(expect3).epsilon(1e-10));

    const auto inv = gram_inverse(c3);
    CHECK((inv * c3 - Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK_THROWS_AS(gram_inverse(cov2(1, 1, 1)), NumericalError);
}

TEST_CASE("quadrature rules are normalized") {
    const auto& gh = gauss_hermite_rule(40);
    double w = 0.0, second = 0.0;
    for (std::size_t i = 0; i < gh.nodes.size(); ++i) {
        w += gh.weights[i];
        second += gh.weights[i] * gh.nodes[i] * gh.nodes[i];
    }
    CHECK(w == doctest::Approx(1.0).epsilon(1e-13));
    CHECK(second == doctest::Approx(1.0).epsilon(1e-12));
    const auto& gl = gauss_legendre_rule(20);
    double total = 0.0;
    for (double x : gl.weights) total += x;
    CHECK(total == doctest::Approx(2.0).epsilon(1e-13));
}

TEST_CASE("moment cache records and evaluates") {
    const auto gelu = make_activation(ActivationKind::gelu);
    MomentCache cache(gelu, cov2(1.0, 0.2, 0.8));
    cache.set_recording(true);
    const auto q = pair_query(1, 1);
    cache.request(q);
    cache.evaluate_pending();
    cache.set_recording(false);
    CHECK(cache.get(q) == doctest::Approx(expect_product(gelu, q, cov2(1.0, 0.2, 0.8))).epsilon(1e-14));
    CHECK(cache.size() >= 1);
}
