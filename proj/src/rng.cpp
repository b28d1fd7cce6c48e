#include "ntkorders/rng.hpp"

#include <cmath>

namespace ntkorders {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t key_of(std::uint64_t seed, std::uint64_t stream, std::uint64_t a, std::uint64_t b,
                     std::uint64_t c) noexcept {
    std::uint64_t h = mix64(seed + kGolden);
    h = mix64(h ^ (stream * kGolden + 0x632BE59BD9B4E019ULL));
    h = mix64(h ^ (a + 0x85157AF5ULL * kGolden));
    h = mix64(h ^ ((b << 32) | (c & 0xFFFFFFFFULL)) ^ (c >> 32) * 0xD6E8FEB86659FD93ULL);
    return h;
}

double to_unit(std::uint64_t x) noexcept { return (static_cast<double>(x >> 11) + 0.5) * 0x1.0p-53; }

void box_muller(std::uint64_t key, double& c, double& s) noexcept {
    const double u1 = to_unit(mix64(key));
    const double u2 = to_unit(mix64(key ^ 0xA0761D6478BD642FULL));
    const double r = std::sqrt(-2.0 * std::log(u1));
    c = r * std::cos(kTwoPi * u2);
    s = r * std::sin(kTwoPi * u2);
}

}  // namespace

std::uint64_t mix64(std::uint64_t x) noexcept {
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ULL;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBULL;
    x ^= x >> 31;
    return x;
}

double counter_uniform(std::uint64_t seed, std::uint64_t stream, std::uint64_t a, std::uint64_t b,
                       std::uint64_t c) noexcept {
    return to_unit(mix64(key_of(seed, stream, a, b, c)));
}

double counter_normal(std::uint64_t seed, std::uint64_t network, std::uint64_t layer, std::uint64_t row,
                      std::uint64_t col) noexcept {
    double c, s;
    box_muller(key_of(seed, network, layer, row, col >> 1), c, s);
    return (col & 1) ? s : c;
}

void fill_standard_normal(std::uint64_t seed, std::uint64_t network, std::uint64_t layer, Eigen::MatrixXd& w) {
    const Eigen::Index rows = w.rows(), cols = w.cols();
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; j += 2) {
            double c, s;
            box_muller(key_of(seed, network, layer, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j) >> 1),
                       c, s);
            w(i, j) = c;
            if (j + 1 < cols) w(i, j + 1) = s;
        }
}

}  // namespace ntkorders
