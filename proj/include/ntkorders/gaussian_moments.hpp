#pragma once

#include <Eigen/Dense>

#include <map>
#include <mutex>
#include <optional>
#include <vector>

#include "ntkorders/activation.hpp"

namespace ntkorders {

struct Factor {
    int var = 0;
    int order = 0;
};

// E[ d^|partials| / dz_partials ( prod sigma^{(order)}(z_var) * prod z_weights ) ].
struct MomentQuery {
    std::vector<Factor> factors;
    std::vector<int> partials;
    std::vector<int> z_weights;
};

enum class DerivativeRoute { automatic, product_rule, stein };

struct MomentOptions {
    DerivativeRoute route = DerivativeRoute::automatic;
    bool use_closed_forms = true;
    int nodes_1d = 80;
    int nodes_2d = 60;
    int nodes_high = 24;
    // Polar rule used for kinked activations on rank <= 2 covariances.
    int polar_angular_nodes = 24;
};

double expect_product(const ActivationModel& model, const MomentQuery& query,
                      const Eigen::MatrixXd& cov, const MomentOptions& options = {});

double expect_partial_product(const ActivationModel& model, const MomentQuery& query,
                              const Eigen::MatrixXd& cov, const MomentOptions& options = {});

std::optional<double> scale_invariant_closed_form(const ActivationModel& model,
                                                  const MomentQuery& query,
                                                  const Eigen::MatrixXd& cov);

Eigen::MatrixXd gram_inverse(const Eigen::MatrixXd& cov);

// Probability that a centered Gaussian with the given covariance lies in the positive orthant.
// Supports dimensions 0 to 4.
double orthant_probability(const Eigen::MatrixXd& cov);

struct QuadratureRule {
    std::vector<double> nodes;
    std::vector<double> weights;
};

// Probabilists' Gauss-Hermite rule with weights summing to one.
const QuadratureRule& gauss_hermite_rule(int n);
// Gauss-Legendre rule on [-1, 1].
const QuadratureRule& gauss_legendre_rule(int n);

// Memoizing evaluator for many queries against one covariance. get() is safe to call
// concurrently; evaluate_all() fills pending entries in parallel.
class MomentCache {
public:
    MomentCache(const ActivationModel& model, Eigen::MatrixXd cov, MomentOptions options = {});

    double get(const MomentQuery& query);
    void request(const MomentQuery& query);
    void evaluate_pending();
    bool recording() const { return recording_; }
    void set_recording(bool on) { recording_ = on; }
    std::size_t size() const;

private:
    static std::vector<int> key_of(const MomentQuery& query);

    ActivationModel model_;
    Eigen::MatrixXd cov_;
    MomentOptions options_;
    bool recording_ = false;
    mutable std::mutex mutex_;
    std::map<std::vector<int>, double> values_;
    std::map<std::vector<int>, MomentQuery> pending_;
};

}  // namespace ntkorders
