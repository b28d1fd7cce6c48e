#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "ntkorders/activation.hpp"

using namespace ntkorders;

TEST_CASE("activation values and derivatives") {
    const auto relu = make_activation(ActivationKind::relu);
    CHECK(eval(relu, 0, 1.5) == 1.5);
    CHECK(eval(relu, 0, -1.5) == 0.0);
    CHECK(eval(relu, 1, 0.3) == 1.0);
    CHECK(eval(relu, 1, -0.3) == 0.0);
    CHECK_THROWS_AS(eval(relu, 2, 0.3), std::domain_error);

    const auto leaky = make_activation("leaky_relu", 0.1);
    CHECK(eval(leaky, 0, -2.0) == doctest::Approx(-0.2));
    CHECK(eval(leaky, 1, -2.0) == doctest::Approx(0.1));
    CHECK(leaky.kinked());
    CHECK(leaky.scale_invariant);

    const auto id = make_activation(ActivationKind::identity);
    CHECK_FALSE(id.kinked());
    CHECK(eval(id, 0, -0.7) == -0.7);
    CHECK(eval(id, 2, 0.4) == 0.0);

    const auto gelu = make_activation(ActivationKind::gelu);
    CHECK_FALSE(gelu.scale_invariant);
    CHECK(eval(gelu, 0, 1.0) == doctest::Approx(0.8413447460685429).epsilon(1e-14));
    // Derivatives against central differences.
    for (auto kind : {ActivationKind::gelu, ActivationKind::erf, ActivationKind::tanh}) {
        const auto f = make_activation(kind);
        for (double z : {-1.3, -0.2, 0.4, 2.1}) {
            for (int k = 0; k < 3; ++k) {
                const double h = 1e-5;
                const double fd = (eval(f, k, z + h) - eval(f, k, z - h)) / (2 * h);
                CHECK(eval(f, k + 1, z) == doctest::Approx(fd).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("activation factory validation") {
    CHECK_THROWS_AS(make_activation("softsign"), std::invalid_argument);
    CHECK_THROWS_AS(make_activation(ActivationKind::leaky_relu), std::invalid_argument);
    CHECK_THROWS_AS(make_activation(ActivationKind::leaky_relu, 1.5), std::invalid_argument);
    CHECK_THROWS_AS(make_activation(ActivationKind::relu, 0.1), std::invalid_argument);
    CHECK(make_activation("leaky_relu", 0.1).name() == "leaky_relu");
}
