#pragma once

#include <Eigen/Dense>

#include <vector>

#include "ntkorders/activation.hpp"
#include "ntkorders/gaussian_moments.hpp"

namespace ntkorders {

// m distinct inputs of equal dimension n0, stored row-wise.
class InputSet {
public:
    InputSet() = default;
    explicit InputSet(std::vector<std::vector<double>> inputs);
    explicit InputSet(const Eigen::MatrixXd& rows);

    int size() const { return static_cast<int>(x_.rows()); }
    int dimension() const { return static_cast<int>(x_.cols()); }
    const Eigen::MatrixXd& matrix() const { return x_; }
    InputSet scaled(double factor) const;
    InputSet subset(const std::vector<int>& indices) const;

private:
    Eigen::MatrixXd x_;
};

struct KernelState {
    int layer = 1;
    Eigen::MatrixXd K;
    Eigen::MatrixXd Theta;
};

template <typename T>
struct Rank4 {
    int m = 0;
    std::vector<T> data;

    Rank4() = default;
    explicit Rank4(int size) : m(size), data(static_cast<std::size_t>(size) * size * size * size, T{}) {}
    T& operator()(int a, int b, int c, int d) { return data[((a * m + b) * m + c) * m + d]; }
    const T& operator()(int a, int b, int c, int d) const { return data[((a * m + b) * m + c) * m + d]; }
};
using Tensor4 = Rank4<double>;

struct Susceptibilities {
    Eigen::MatrixXd chi_perp;
    Eigen::MatrixXd chi_bowtie;
    Tensor4 chi_parallel;          // (alpha, beta, gamma, delta)
    std::vector<double> chi_circ;  // (epsilon, gamma, lambda), row-major
    double circ(int e, int g, int l) const { return chi_circ[(e * m + g) * m + l]; }
    int m = 0;
};

KernelState init_kernels(const InputSet& inputs, double cw1, int n0);
KernelState step_kernels(const KernelState& state, const ActivationModel& model, double cw,
                         const MomentOptions& options = {});
std::vector<KernelState> run_kernels(const InputSet& inputs, const ActivationModel& model,
                                     const std::vector<double>& cw_schedule, const MomentOptions& options = {});

Susceptibilities susceptibilities(const KernelState& state, const ActivationModel& model, double cw,
                                  const MomentOptions& options = {});

// chi_circ through its delta expansion C[delta_eg <s'_e s'_l> + delta_gl <s_e s''_l>].
std::vector<double> chi_circ_delta_expansion(const KernelState& state, const ActivationModel& model, double cw,
                                             const MomentOptions& options = {});

struct CriticalPoint {
    double cw = 0.0;
    double kernel = 0.0;  // fixed-point variance K*, 0 when the trivial fixed point is selected
};

CriticalPoint critical_point(const ActivationModel& model, const MomentOptions& options = {});
double critical_cw(const ActivationModel& model, const InputSet& inputs, const MomentOptions& options = {});

}  // namespace ntkorders
