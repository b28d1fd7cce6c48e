#pragma once

#include <optional>
#include <string>

namespace ntkorders {

enum class ActivationKind { relu, leaky_relu, identity, gelu, erf, tanh };

struct ActivationModel {
    ActivationKind kind = ActivationKind::relu;
    double alpha = 0.0;
    bool scale_invariant = true;
    double a_plus = 1.0;
    double a_minus = 0.0;
    int max_smooth_derivative_order = 1;

    // True for the piecewise-linear kinds whose derivative jumps at zero.
    bool kinked() const { return scale_invariant && a_plus != a_minus; }
    std::string name() const;
};

ActivationModel make_activation(ActivationKind kind, std::optional<double> alpha = std::nullopt);
ActivationModel make_activation(const std::string& kind, std::optional<double> alpha = std::nullopt);

// Order-th derivative of sigma at z. Throws std::domain_error when the order is not
// available pointwise for this kind.
double eval(const ActivationModel& model, int order, double z);

// Unchecked evaluation used on hot paths; order must be valid for the model.
double eval_unchecked(const ActivationModel& model, int order, double z) noexcept;

}  // namespace ntkorders
