#pragma once

#include <stdexcept>
#include <string>

namespace ntkorders {

// Raised when a numerical routine cannot produce a trustworthy value. The stage names the
// recursion or primitive that failed so the CLI can report it.
class NumericalError : public std::runtime_error {
public:
    NumericalError(std::string stage, const std::string& what)
        : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

// A derivative or moment that has no pointwise value and no distributional rule.
class UnsupportedDerivative : public NumericalError {
public:
    explicit UnsupportedDerivative(const std::string& what) : NumericalError("gaussian_moments", what) {}
};

}  // namespace ntkorders
