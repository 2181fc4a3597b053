#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <vector>

#include "dualnet/duallayers.hpp"
#include "dualnet/network.hpp"
#include "dualnet/projest.hpp"

namespace dualnet {

enum class BallNorm { linf, l2 };

/// Perturbation set {x + Δ : ‖Δ‖ ≤ eps}.
struct Ball {
  BallNorm norm = BallNorm::linf;
  double eps = 0.0;
};

enum class BoundMode { exact, median, high_prob };

/// How the norm terms inside bound computations are evaluated.
struct EstimatorConfig {
  BoundMode mode = BoundMode::exact;
  std::size_t r = 10;       // median mode projection count
  std::uint64_t seed = 0;   // projection seed (median and high-probability)
  TailPlan tail;            // high-probability mode: k, replicas, eps_tail
  /// Keep the dual network's forward pipes alive up to the output so that
  /// objective_forward can be evaluated.
  bool pipe_to_output = false;
  /// High-probability mode only: also run the exact pipes and record every
  /// estimate next to the quantity it bounds.
  bool audit = false;

  static EstimatorConfig exact() { return {}; }
  static EstimatorConfig median(std::size_t r, std::uint64_t seed);
  static EstimatorConfig high_prob(const TailPlan& plan, std::uint64_t seed);
};

struct EstimateAudit {
  int layer;   // activation layer whose input bound used the estimate
  int source;  // 1 for the input term, else the activation id
  double estimate;
  double exact;
};

/// Dual network of a NetworkGraph around an anchor point, with the
/// pre-activation bounds of every activation layer.
class DualNetwork {
 public:
  const NetworkGraph& net() const { return net_; }
  const Ball& ball() const { return ball_; }
  const Tensor& anchor() const { return x_; }
  const EstimatorConfig& config() const { return config_; }

  const DualLayer& layer(int id) const { return *layers_.at(static_cast<std::size_t>(id - 2)); }
  /// Bounds on the input of activation layer `id`.
  const PreactBounds& bounds(int id) const { return bounds_.at(id); }
  const std::map<int, PreactBounds>& all_bounds() const { return bounds_; }
  /// Anchor pushed through the linearized network, (1, n_k).
  const Tensor& output_center() const { return center_k_; }
  const std::vector<EstimateAudit>& audit() const { return audit_; }

  struct OutputPipe {
    int source;  // 1 = input
    Tensor rows; // (cols, n_k)
  };
  const std::vector<OutputPipe>& output_pipes() const { return pipes_; }

 private:
  friend DualNetwork build_dual(const NetworkGraph&, const Tensor&, const Ball&, const EstimatorConfig&);
  explicit DualNetwork(NetworkGraph net) : net_(std::move(net)) {}

  NetworkGraph net_;
  Ball ball_;
  Tensor x_;
  EstimatorConfig config_;
  std::vector<std::unique_ptr<DualLayer>> layers_;
  std::map<int, PreactBounds> bounds_;
  Tensor center_k_;
  std::vector<OutputPipe> pipes_;
  std::vector<EstimateAudit> audit_;
};

/// Builds every dual layer in one forward sweep, computing the bounds of
/// each activation input from the dual pipes that reach it.
DualNetwork build_dual(const NetworkGraph& net, const Tensor& x, const Ball& ball,
                       const EstimatorConfig& config = {});

/// All dual variables for objective rows C (R, n_k): ν_k = -C pushed back
/// through the dual layers.  nu[i] is the (R, n_i) dual variable of z_i and
/// h[i] the per-row objective term of layer i.
struct DualVariables {
  std::map<int, Tensor> nu;
  std::map<int, Tensor> h;
};
DualVariables dual_backward(const DualNetwork& dual, const Tensor& C);

/// J = -ν₁ᵀx - eps ‖ν₁‖_* - Σ h_i for every row of C, evaluated exactly.
Tensor objective_backward(const DualNetwork& dual, const Tensor& C);
/// Same objective from the output pipes, using the build's estimator for
/// the norm terms.  Requires pipe_to_output.
Tensor objective_forward(const DualNetwork& dual, const Tensor& C);

/// Number of norm estimates a high-probability build of `net` makes.
std::size_t high_prob_estimate_count(const NetworkGraph& net);

}  // namespace dualnet
