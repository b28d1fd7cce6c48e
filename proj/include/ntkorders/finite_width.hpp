#pragma once

#include <Eigen/Dense>

#include <vector>

#include "ntkorders/infinite_width.hpp"

namespace ntkorders {

// Leading 1/n statistics over m inputs. Every rank-4 array is stored in the index order of its
// printed subscripts:
//   V4(a,b,c,d)  four-point cumulant of preactivations, pairs (a,b) and (c,d)
//   D(a,b,c,d)   preactivation pair (a,b), NTK pair (c,d)
//   F(a,b,c,d)   preactivations a and c, NTK pair (b,d)
//   A(a,b,c,d)   NTK pairs (a,b) and (c,d), diagonal neurons
//   B(a,b,c,d)   NTK pairs (a,c) and (b,d), shared neurons
//   P, Q, R, S, T, U  dNTK and ddNTK tensors
struct TensorState {
    int layer = 1;
    int m = 0;
    Tensor4 V4, D, F, A, B;
    Eigen::MatrixXd K1, Theta1;
    Tensor4 P, Q, R, S, T, U;
};

struct StepOptions {
    // n_l / n_{l-1} for the step l -> l+1.
    double width_ratio = 1.0;
    bool dntk = false;
    MomentOptions moments{};
};

TensorState init_tensors(const InputSet& inputs);
TensorState init_tensors(int m);

// Each partial step reads the layer-l state `cur` and writes its fields of the layer-(l+1) state `next`.
void step_leading_tensors(const TensorState& cur, const KernelState& k, const ActivationModel& model, double cw,
                          TensorState& next, const StepOptions& options = {});
void step_mean_corrections(const TensorState& cur, const KernelState& k, const ActivationModel& model, double cw,
                           TensorState& next, const StepOptions& options = {});
// Requires next.F (leading tensors of layer l+1) to be filled already.
void step_dntk_tensors(const TensorState& cur, const KernelState& k, const ActivationModel& model, double cw,
                       TensorState& next, const StepOptions& options = {});
void step_ddntk_tensors(const TensorState& cur, const KernelState& k, const ActivationModel& model, double cw,
                        TensorState& next, const StepOptions& options = {});

// Full step in dependency order. dNTK and ddNTK tensors are advanced when options.dntk is set.
TensorState step_tensors(const TensorState& cur, const KernelState& k, const ActivationModel& model, double cw,
                         const StepOptions& options = {});

struct TheoryRun {
    std::vector<KernelState> kernels;
    std::vector<TensorState> tensors;
};

// Layers 1..depth. widths lists the hidden widths n_1..n_{depth-1} (empty means equal widths).
TheoryRun run_theory(const InputSet& inputs, const ActivationModel& model, const std::vector<double>& cw_schedule,
                     bool dntk = false, const std::vector<int>& widths = {}, const MomentOptions& moments = {});

enum class TensorKind { V4, D, F, A, B, P, Q, R, S, T, U };
const Tensor4& tensor_of(const TensorState& s, TensorKind kind);
Tensor4& tensor_of(TensorState& s, TensorKind kind);
const char* tensor_name(TensorKind kind);
TensorKind tensor_kind_from_name(const std::string& name);

// Change of component (a,a,a,a) of `kind` after one step when every entry of that tensor in `cur`
// is raised by one. At criticality the leading tensors have unit multipliers.
double perturbation_multiplier(const TensorState& cur, const KernelState& k, const ActivationModel& model, double cw,
                               TensorKind kind, int a = 0, const StepOptions& options = {});

// Largest violation of the documented symmetries, relative to the largest entry.
double symmetry_violation(const TensorState& s);

struct ScaleInvarianceReport {
    std::vector<double> kernels;
    // 2K^2 d/dK[2K^2 d/dK <dOmega>] - 8K^3 d/dK <dOmega> with <dOmega> = <s s> + C Theta <s' s'>.
    std::vector<double> eq11_residuals;
    // <s' s' (z^2 - K)>, which must vanish for the on-diagonal theorem.
    std::vector<double> eq9_residuals;
    // <s' s' (z^2 - K)> - 2K^2 d/dK <s' s'>; zero for every activation.
    std::vector<double> eq9_consistency;
    std::vector<double> scales;
    bool no_on_diagonal_corrections = false;
};

// Single-input identities behind the absence of on-diagonal corrections; derivatives in K are
// central differences with step 1e-4 K. C_W and Theta enter only through <dOmega>.
ScaleInvarianceReport check_scale_invariant_identities(const ActivationModel& model, const std::vector<double>& K_grid,
                                                      double cw = 2.0, double theta = 1.0,
                                                      const MomentOptions& options = {});

}  // namespace ntkorders
