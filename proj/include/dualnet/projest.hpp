#pragma once

#include <cstdint>
#include <vector>

#include "dualnet/tensor.hpp"

namespace dualnet {

enum class ProjectionNorm { l1_cauchy, l2_normal };

struct ProjectionPlan {
  std::size_t r = 10;
  ProjectionNorm norm = ProjectionNorm::l1_cauchy;
  std::uint64_t seed = 0;
};

/// Counter-based uniform in (0, 1): the value depends only on (seed, index).
double counter_uniform(std::uint64_t seed, std::uint64_t index);
/// Derives an independent stream key from a parent seed and a label.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t label);

/// i.i.d. standard Cauchy entries, tan(pi (U - 1/2)).
Tensor sample_cauchy(std::size_t rows, std::size_t cols, std::uint64_t seed);
/// i.i.d. standard normal entries (Box-Muller on counter uniforms).
Tensor sample_normal(std::size_t rows, std::size_t cols, std::uint64_t seed);
/// Projection matrix for a plan: Cauchy for l1, normal for l2.
Tensor sample_projection(std::size_t rows, std::size_t cols, ProjectionNorm norm, std::uint64_t seed);

/// Per-column estimates from projected samples P (r x n) whose column j
/// holds the r values ν_jᵀR.
Tensor median_l1(const Tensor& projected);
Tensor rms_l2(const Tensor& projected);

/// Per-row ‖ν_j‖₁ estimate of a (rows x d) matrix using d x r projections.
Tensor estimate_l1(const Tensor& nu, const ProjectionPlan& plan);
/// Per-row ‖ν_j‖₂ estimate.
Tensor estimate_l2(const Tensor& nu, const ProjectionPlan& plan);
/// Per-row estimate of Σ_{t∈I} ℓ_t [ν_t]₊ where I are the units with
/// ℓ < 0 < u, via ½(−‖diag(ℓ_I) ν‖₁ + ν·ℓ_I).
Tensor estimate_relu_term(const Tensor& nu, const Tensor& lower, const Tensor& upper,
                          const ProjectionPlan& plan);
/// Exact Σ_{t∈I} ℓ_t [ν_t]₊ per row.
Tensor exact_relu_term(const Tensor& nu, const Tensor& lower, const Tensor& upper);

/// Geometric-mean upper bound per column: (1/(1-eps)) Π|P_i|^(1/k) over
/// the k rows of P.
Tensor geo_estimate(const Tensor& projected, double eps_tail);
/// Max of geo estimates over m consecutive blocks of k rows (P is (m k) x n).
Tensor maxgeo_estimate(const Tensor& projected, std::size_t k, std::size_t m, double eps_tail);

/// Parameters of a union-bounded geometric certificate.
struct TailPlan {
  double delta = 0.01;
  std::size_t count = 1;  // N
  std::size_t replicas = 1;  // m
  double delta_hat = 0.0;
  std::size_t k = 0;
  double eps_tail = 0.0;
  /// Tail probability bound exp(-k D(eps_tail)) actually achieved.
  double achieved = 1.0;
};

/// Chernoff rate D(eps) = eps² / G(eps) of the lower tail of the geometric
/// estimator.
double tail_rate(double eps_tail);
/// exp(-k D(eps)).
double tail_probability(std::size_t k, double eps_tail);
/// Smallest k with exp(-k D(eps)) <= target.
std::size_t min_projections(double eps_tail, double target);

/// Chooses (k, eps_tail) for N estimates with m replicas: the smallest eps
/// on a 1e-3 grid that is feasible within k_budget projections, then the
/// smallest k feasible at that eps.  Throws when even eps near 1 fails.
TailPlan plan_tail(double delta, std::size_t count, std::size_t replicas, std::size_t k_budget = 200);

/// n_2 + 2 n_3 + ... + (k-2) n_{k-1} for the sizes of the bounded layers.
std::size_t estimate_count(const std::vector<std::size_t>& layer_sizes);

}  // namespace dualnet
