#pragma once

#include <Eigen/Dense>

#include <cstdint>

namespace ntkorders {

// Stateless generator: every draw is a pure function of its coordinates.
std::uint64_t mix64(std::uint64_t x) noexcept;

// Uniform in (0, 1) keyed by (seed, stream, a, b, c).
double counter_uniform(std::uint64_t seed, std::uint64_t stream, std::uint64_t a, std::uint64_t b,
                       std::uint64_t c) noexcept;

// Standard normal weight entry for (seed, network, layer, row, col). Columns 2k and 2k+1 share one
// Box-Muller pair.
double counter_normal(std::uint64_t seed, std::uint64_t network, std::uint64_t layer, std::uint64_t row,
                      std::uint64_t col) noexcept;

// Fills w (rows x cols, already sized) with counter_normal entries.
void fill_standard_normal(std::uint64_t seed, std::uint64_t network, std::uint64_t layer, Eigen::MatrixXd& w);

}  // namespace ntkorders
