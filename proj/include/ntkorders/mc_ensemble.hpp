#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ntkorders/activation.hpp"
#include "ntkorders/finite_width.hpp"
#include "ntkorders/infinite_width.hpp"

namespace ntkorders {

// Bias-free MLP under NTK parametrization: z^(l+1) = sqrt(C_W^(l+1) / n_l) w^(l+1) sigma(z^(l)).
struct NetworkSpec {
    std::vector<int> widths;  // n_0, n_1, ..., n_L
    ActivationModel activation;
    std::vector<double> cw_schedule;  // C_W for layers 1..L
    std::uint64_t base_seed = 0;
    std::string parametrization = "ntk";

    int depth() const { return static_cast<int>(widths.size()) - 1; }
    void validate() const;
};

// Equal hidden widths with a constant C_W.
NetworkSpec make_uniform_spec(int n0, int width, int depth, const ActivationModel& activation, double cw,
                              std::uint64_t seed);

struct SampledNetwork {
    std::int64_t network_index = 0;
    std::vector<Eigen::MatrixXd> weights;  // weights[l] has shape n_{l+1} x n_l, standard-normal entries
};

SampledNetwork sample_network(const NetworkSpec& spec, std::int64_t index);

// Preactivations per layer; element l-1 holds z^(l) as an n_l x m matrix (one column per input).
std::vector<Eigen::MatrixXd> forward_pass(const NetworkSpec& spec, const SampledNetwork& net, const InputSet& inputs);

struct EmpiricalKernels {
    int layer = 1;
    Eigen::MatrixXd z;                   // n_l x m
    std::vector<Eigen::MatrixXd> theta;  // theta[a * m + b](i, j) = Theta-hat_{ij, ab}
    Eigen::MatrixXd K_trace, Theta_trace;
    Eigen::MatrixXd K_channel0, Theta_channel0;
    const Eigen::MatrixXd& ntk(int a, int b) const { return theta[a * z.cols() + b]; }
};

// Jacobian contractions by backward accumulation of dz^(layer)/dz^(k) chains.
EmpiricalKernels empirical_kernels(const NetworkSpec& spec, const SampledNetwork& net, const InputSet& inputs,
                                   int layer);

struct EnsembleEstimate {
    double mean = 0.0;
    double standard_error = 0.0;
    std::int64_t n_samples = 0;
    int n_repetitions = 0;
};

enum class ObservableKind { K, Theta, V4, D, F, A, B };
const char* observable_name(ObservableKind kind);
ObservableKind observable_kind_from_name(const std::string& name);

struct Observable {
    ObservableKind kind = ObservableKind::K;
    int layer = 1;
};

// Kernel means are m x m and rank-4 tensors m^4, flattened row-major in values.
struct ObservableEstimate {
    Observable observable;
    int m = 0;
    std::vector<EnsembleEstimate> values;
    const EnsembleEstimate& at(int a, int b) const { return values[a * m + b]; }
    const EnsembleEstimate& at(int a, int b, int c, int d) const { return values[((a * m + b) * m + c) * m + d]; }
};

enum class ChannelMode { trace_average, fixed_channel };

// Channel pairs (i, j) summed by the A, B, D, F estimators. `all` keeps the i = j terms, which adds an
// O(1/n) offset such as (A + B)/n to B; `distinct` drops them, as the V4 estimator always does.
enum class ChannelPairs { distinct, all };

struct EnsembleOptions {
    std::int64_t n_net = 1000;
    int n_stats = 1;
    int workers = 1;
    // Applies to the K and Theta means; rank-4 estimators always sum over channels.
    ChannelMode channel = ChannelMode::trace_average;
    ChannelPairs pairs = ChannelPairs::distinct;
};

// Networks of repetition r are indices [r n_net, (r+1) n_net). Standard errors are the standard
// deviation over repetitions when n_stats >= 2; with one repetition they are sample-std / sqrt(N) for
// kernel means and grouped-jackknife errors for rank-4 tensors.
std::vector<ObservableEstimate> run_ensemble(const NetworkSpec& spec, const InputSet& inputs,
                                             const std::vector<Observable>& observables,
                                             const EnsembleOptions& options);

Rank4<EnsembleEstimate> estimate_rank4(const NetworkSpec& spec, const InputSet& inputs, int layer, ObservableKind kind,
                                       std::int64_t n_net, int n_stats, int workers = 1);

// Serial literal evaluation of the same estimators through empirical_kernels; used as a test oracle
// for the parallel forward recursion.
std::vector<ObservableEstimate> run_ensemble_reference(const NetworkSpec& spec, const InputSet& inputs,
                                                       const std::vector<Observable>& observables,
                                                       const EnsembleOptions& options);

// Joint cumulant of n <= 4 variables from the moments of every non-empty subset, keyed by bitmask.
double moment_to_cumulant(const std::map<unsigned, double>& moments, int n);

// Network-index chunk processed by one task.
inline constexpr int kChunkSize = 64;

}  // namespace ntkorders
