#include "ntkorders/activation.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace ntkorders {

namespace {

constexpr double inv_sqrt_2pi = 0.3989422804014327;

double gauss_cdf(double z) { return 0.5 * std::erfc(-z * std::numbers::sqrt2 / 2.0); }
double gauss_pdf(double z) { return inv_sqrt_2pi * std::exp(-0.5 * z * z); }

}  // namespace

std::string ActivationModel::name() const {
    switch (kind) {
        case ActivationKind::relu: return "relu";
        case ActivationKind::leaky_relu: return "leaky_relu";
        case ActivationKind::identity: return "identity";
        case ActivationKind::gelu: return "gelu";
        case ActivationKind::erf: return "erf";
        case ActivationKind::tanh: return "tanh";
    }
    return "unknown";
}

ActivationModel make_activation(ActivationKind kind, std::optional<double> alpha) {
    if (alpha.has_value() != (kind == ActivationKind::leaky_relu))
        throw std::invalid_argument("alpha must be given exactly for leaky_relu");
    ActivationModel m;
    m.kind = kind;
    switch (kind) {
        case ActivationKind::relu:
            break;
        case ActivationKind::leaky_relu:
            if (!(*alpha > 0.0 && *alpha < 1.0))
                throw std::invalid_argument("leaky_relu alpha must lie in (0, 1)");
            m.alpha = *alpha;
            m.a_minus = *alpha;
            break;
        case ActivationKind::identity:
            m.a_minus = 1.0;
            m.max_smooth_derivative_order = 3;
            break;
        case ActivationKind::gelu:
        case ActivationKind::erf:
        case ActivationKind::tanh:
            m.scale_invariant = false;
            m.a_plus = m.a_minus = 0.0;
            m.max_smooth_derivative_order = 3;
            break;
    }
    return m;
}

ActivationModel make_activation(const std::string& kind, std::optional<double> alpha) {
    if (kind == "relu") return make_activation(ActivationKind::relu, alpha);
    if (kind == "leaky_relu") return make_activation(ActivationKind::leaky_relu, alpha);
    if (kind == "identity") return make_activation(ActivationKind::identity, alpha);
    if (kind == "gelu") return make_activation(ActivationKind::gelu, alpha);
    if (kind == "erf") return make_activation(ActivationKind::erf, alpha);
    if (kind == "tanh") return make_activation(ActivationKind::tanh, alpha);
    throw std::invalid_argument("unknown activation kind: " + kind);
}

double eval(const ActivationModel& model, int order, double z) {
    if (order < 0 || order > model.max_smooth_derivative_order)
        throw std::domain_error(model.name() + ": derivative order " + std::to_string(order) +
                                " is not defined pointwise");
    return eval_unchecked(model, order, z);
}

double eval_unchecked(const ActivationModel& model, int order, double z) noexcept {
    switch (model.kind) {
        case ActivationKind::relu:
        case ActivationKind::leaky_relu:
        case ActivationKind::identity: {
            const double slope = z >= 0.0 ? model.a_plus : model.a_minus;
            if (order == 0) return slope * z;
            if (order == 1) return slope;
            return 0.0;
        }
        case ActivationKind::gelu: {
            const double phi = gauss_pdf(z);
            switch (order) {
                case 0: return z * gauss_cdf(z);
                case 1: return gauss_cdf(z) + z * phi;
                case 2: return phi * (2.0 - z * z);
                default: return phi * (z * z * z - 4.0 * z);
            }
        }
        case ActivationKind::erf: {
            if (order == 0) return std::erf(z);
            const double d1 = 2.0 / std::sqrt(std::numbers::pi) * std::exp(-z * z);
            if (order == 1) return d1;
            if (order == 2) return -2.0 * z * d1;
            return (4.0 * z * z - 2.0) * d1;
        }
        case ActivationKind::tanh: {
            const double t = std::tanh(z);
            const double s = 1.0 - t * t;
            if (order == 0) return t;
            if (order == 1) return s;
            if (order == 2) return -2.0 * t * s;
            return -2.0 * s * (1.0 - 3.0 * t * t);
        }
    }
    return 0.0;
}

}  // namespace ntkorders
