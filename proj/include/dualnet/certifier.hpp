#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dualnet/autodual.hpp"
#include "dualnet/network.hpp"

namespace dualnet {

/// How J is evaluated when certifying.
struct CertifyOptions {
  BoundMode mode = BoundMode::exact;
  std::size_t r = 10;            // median
  std::uint64_t seed = 0;        // median and high-probability
  double delta = 0.01;           // high-probability failure budget
  std::size_t replicas = 10;     // high-probability m
  std::size_t k_budget = 200;    // high-probability projections per replica
  double slack = 1e-6;           // J must exceed this to certify
};

std::string mode_label(const CertifyOptions& options);

struct Certificate {
  std::size_t example_id = 0;
  int label = -1;      // true label when known
  int predicted = 0;
  /// J for c = e_pred - e_j, indexed by class j; the entry at `predicted`
  /// is 0 and is excluded from the minimum.
  std::vector<double> objective;
  double min_objective = 0.0;
  bool certified = false;
  std::string mode;
  double slack = 1e-6;
  std::optional<TailPlan> plan;
};

/// Rows e_y - e_j for every j != y.
Tensor target_rows(int y, std::size_t classes);
/// Rows e_y - e_j for every j, including the zero row at y.
Tensor all_target_rows(int y, std::size_t classes);

/// Evaluation of J for each row of C under the given bound mode.
Tensor robust_objective(const NetworkGraph& net, const Tensor& x, const Ball& ball, const Tensor& C,
                        const CertifyOptions& options = {});

/// Certificate for the network's own prediction at x.  A tie in the
/// prediction is never certified.
Certificate certify(const NetworkGraph& net, const Tensor& x, const Ball& ball, const CertifyOptions& options = {},
                    std::size_t example_id = 0);

/// Certificate built from max-geometric ℓ1 upper bounds: holds with
/// probability at least 1 - delta.
Certificate certify_high_prob(const NetworkGraph& net, const Tensor& x, const Ball& ball, double delta,
                              std::size_t replicas, std::uint64_t seed = 0, std::size_t k_budget = 200,
                              std::size_t example_id = 0);

struct RobustErrorResult {
  double robust_error = 0.0;
  double standard_error = 0.0;
  std::size_t n = 0;
  std::vector<Certificate> certificates;
};

/// Fraction of examples misclassified or uncertified, plus the plain error.
/// `xs` is (n, input_size).  Work is split over `threads` workers; the
/// result does not depend on the thread count.
RobustErrorResult robust_error(const NetworkGraph& net, const Tensor& xs, const std::vector<int>& labels,
                               const Ball& ball, const CertifyOptions& options = {}, std::size_t threads = 1);

struct AttackBudget {
  std::size_t steps = 60;
  std::size_t restarts = 3;
  std::uint64_t seed = 0;
  /// Exhaustive corner and grid search when the input has at most this
  /// many dimensions.
  std::size_t grid_dim = 3;
  std::size_t grid_points = 21;
};

/// Smallest cᵀ f(x + Δ) found over ‖Δ‖ <= eps by projected gradient
/// descent plus, for tiny inputs, grid and corner search.  Always an upper
/// bound on the true minimum.
double attack_oracle(const NetworkGraph& net, const Tensor& x, const Ball& ball, const Tensor& c,
                     const AttackBudget& budget = {});

/// ℓ2 radius with the volume of the ℓ∞ ball of radius eps_inf in d dims.
double epsilon_l2_equivalent(double d, double eps_inf);

}  // namespace dualnet
