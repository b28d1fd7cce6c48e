#include "ntkorders/fits.hpp"

#include <cmath>
#include <stdexcept>

namespace ntkorders {

namespace {

FitResult linear_fit(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx <= 0.0) throw std::invalid_argument("fit needs at least two distinct abscissae");
    FitResult f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    double rss = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double r = y[i] - (f.intercept + f.slope * x[i]);
        rss += r * r;
    }
    f.residual_norm = std::sqrt(rss);
    // A series constant to relative 1e-10 counts as fitted exactly; r^2 of roundoff is meaningless.
    f.r_squared = syy > 1e-20 * n ? std::max(0.0, 1.0 - rss / syy) : 1.0;
    f.n_points = static_cast<int>(x.size());
    return f;
}

FitResult log_fit(const Series& series, double ell_start, bool log_x) {
    std::vector<double> x, y;
    for (const auto& [l, v] : series) {
        if (l < ell_start) continue;
        if (!std::isfinite(v) || v == 0.0) throw std::invalid_argument("fit values must be finite and nonzero");
        if (log_x && !(l > 0.0)) throw std::invalid_argument("power-law fit needs positive layers");
        x.push_back(log_x ? std::log(l) : l);
        y.push_back(std::log(std::abs(v)));
    }
    if (x.size() < 3) throw std::invalid_argument("fit needs at least three points with l >= ell_start");
    return linear_fit(x, y);
}

}  // namespace

FitResult fit_power_law(const Series& series, double ell_start) { return log_fit(series, ell_start, true); }

FitResult fit_exponential(const Series& series, double ell_start) { return log_fit(series, ell_start, false); }

const char* growth_model_name(GrowthModel model) {
    return model == GrowthModel::power_law ? "power_law" : "exponential";
}

GrowthModel select_growth_model(const Series& series, double ell_start) {
    const FitResult p = fit_power_law(series, ell_start);
    const FitResult e = fit_exponential(series, ell_start);
    return e.residual_norm < p.residual_norm - 1e-10 ? GrowthModel::exponential : GrowthModel::power_law;
}

}  // namespace ntkorders
