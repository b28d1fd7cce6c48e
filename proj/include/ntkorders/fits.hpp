#pragma once

#include <string>
#include <utility>
#include <vector>

namespace ntkorders {

struct FitResult {
    double slope = 0.0;  // exponent for power laws, rate for exponentials
    double intercept = 0.0;
    double r_squared = 0.0;
    double residual_norm = 0.0;
    int n_points = 0;
};

using Series = std::vector<std::pair<double, double>>;  // (layer, value)

// Least squares on (log l, log |v|) over points with l >= ell_start.
FitResult fit_power_law(const Series& series, double ell_start = 1.0);
// Least squares on (l, log |v|) over points with l >= ell_start.
FitResult fit_exponential(const Series& series, double ell_start = 1.0);

enum class GrowthModel { power_law, exponential };
const char* growth_model_name(GrowthModel model);

// Both fits share the log |v| axis; the smaller residual norm wins and ties (within 1e-10)
// go to the power law.
GrowthModel select_growth_model(const Series& series, double ell_start = 1.0);

}  // namespace ntkorders
