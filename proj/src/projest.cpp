#include "dualnet/projest.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "dualnet/ops.hpp"

namespace dualnet {

namespace {

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void require_r(std::size_t r) {
  if (r < 1) throw std::invalid_argument("projection count r must be at least 1");
}

}  // namespace

double counter_uniform(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = mix64(seed + 0x9e3779b97f4a7c15ULL * (index + 1));
  return (static_cast<double>(z >> 11) + 0.5) * 0x1.0p-53;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t label) {
  return mix64(mix64(seed) ^ (label * 0xd1b54a32d192ed03ULL + 0x2545f4914f6cdd1dULL));
}

Tensor sample_cauchy(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::vector<double> v(rows * cols);
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = std::tan(std::numbers::pi * (counter_uniform(seed, i) - 0.5));
  }
  return Tensor({rows, cols}, std::move(v));
}

Tensor sample_normal(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::vector<double> v(rows * cols);
  for (std::size_t i = 0; i < v.size(); ++i) {
    double u1 = counter_uniform(seed, 2 * i), u2 = counter_uniform(seed, 2 * i + 1);
    v[i] = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
  return Tensor({rows, cols}, std::move(v));
}

Tensor sample_projection(std::size_t rows, std::size_t cols, ProjectionNorm norm, std::uint64_t seed) {
  return norm == ProjectionNorm::l1_cauchy ? sample_cauchy(rows, cols, seed) : sample_normal(rows, cols, seed);
}

Tensor median_l1(const Tensor& projected) { return ops::median_axis(ops::abs(projected), 0); }

Tensor rms_l2(const Tensor& projected) { return ops::rms_axis(projected, 0); }

Tensor estimate_l1(const Tensor& nu, const ProjectionPlan& plan) {
  require_r(plan.r);
  if (nu.rank() != 2) throw ShapeError("estimate_l1 expects a (rows, d) matrix");
  Tensor r = sample_cauchy(nu.dim(1), plan.r, plan.seed);
  return ops::median_axis(ops::abs(ops::matmul(nu, r)), 1);
}

Tensor estimate_l2(const Tensor& nu, const ProjectionPlan& plan) {
  require_r(plan.r);
  if (nu.rank() != 2) throw ShapeError("estimate_l2 expects a (rows, d) matrix");
  Tensor r = sample_normal(nu.dim(1), plan.r, plan.seed);
  return ops::rms_axis(ops::matmul(nu, r), 1);
}

namespace {
Tensor masked_lower(const Tensor& lower, const Tensor& upper) {
  if (lower.size() != upper.size()) throw ShapeError("bounds differ in size");
  std::vector<double> l(lower.size(), 0.0);
  for (std::size_t i = 0; i < l.size(); ++i) {
    if (lower[i] > upper[i]) throw std::invalid_argument("lower bound exceeds upper bound");
    if (lower[i] < 0.0 && upper[i] > 0.0) l[i] = lower[i];
  }
  return Tensor::vector(std::move(l));
}

Tensor row_dot(const Tensor& nu, const Tensor& v) {
  return ops::reshape(ops::matmul(nu, ops::reshape(v, {v.size(), 1})), {nu.dim(0)});
}
}  // namespace

Tensor estimate_relu_term(const Tensor& nu, const Tensor& lower, const Tensor& upper, const ProjectionPlan& plan) {
  Tensor l = masked_lower(lower, upper);
  Tensor norm = estimate_l1(ops::affine_diag(nu, l, Tensor()), plan);
  return ops::scale(ops::sub(row_dot(nu, l), norm), 0.5);
}

Tensor exact_relu_term(const Tensor& nu, const Tensor& lower, const Tensor& upper) {
  Tensor l = masked_lower(lower, upper);
  return row_dot(ops::relu(nu), l);
}

Tensor geo_estimate(const Tensor& projected, double eps_tail) {
  return maxgeo_estimate(projected, projected.dim(0), 1, eps_tail);
}

Tensor maxgeo_estimate(const Tensor& projected, std::size_t k, std::size_t m, double eps_tail) {
  if (projected.rank() != 2 || projected.dim(0) != k * m || k == 0 || m == 0) {
    throw ShapeError("maxgeo: expected (m k, n) samples, got " + to_string(projected.shape()));
  }
  if (!(eps_tail > 0.0 && eps_tail < 1.0)) throw std::invalid_argument("eps_tail must lie in (0, 1)");
  const std::size_t n = projected.dim(1);
  std::vector<double> out(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t rep = 0; rep < m; ++rep) {
      double logsum = 0.0;
      bool zero = false;
      for (std::size_t i = 0; i < k; ++i) {
        double a = std::abs(projected[(rep * k + i) * n + j]);
        if (a == 0.0) {
          zero = true;
          break;
        }
        logsum += std::log(a);
      }
      double geo = zero ? 0.0 : std::exp(logsum / static_cast<double>(k)) / (1.0 - eps_tail);
      out[j] = std::max(out[j], geo);
    }
  }
  return Tensor::vector(std::move(out));
}

double tail_rate(double eps_tail) {
  if (!(eps_tail > 0.0 && eps_tail < 1.0)) throw std::invalid_argument("eps_tail must lie in (0, 1)");
  const double lg = std::log(1.0 - eps_tail);
  const double t = 2.0 / std::numbers::pi * lg;
  return -0.5 * std::log1p(t * t) + t * std::atan(t);
}

double tail_probability(std::size_t k, double eps_tail) {
  return std::exp(-static_cast<double>(k) * tail_rate(eps_tail));
}

std::size_t min_projections(double eps_tail, double target) {
  if (!(target > 0.0 && target < 1.0)) throw std::invalid_argument("target probability must lie in (0, 1)");
  auto k = static_cast<std::size_t>(std::ceil(-std::log(target) / tail_rate(eps_tail)));
  k = std::max<std::size_t>(k, 1);
  while (k > 1 && tail_probability(k - 1, eps_tail) <= target) --k;
  while (tail_probability(k, eps_tail) > target) ++k;
  return k;
}

TailPlan plan_tail(double delta, std::size_t count, std::size_t replicas, std::size_t k_budget) {
  if (!(delta > 0.0 && delta < 1.0)) throw std::invalid_argument("delta must lie in (0, 1)");
  if (count < 1) throw std::invalid_argument("estimate count N must be at least 1");
  if (replicas < 1) throw std::invalid_argument("replica count m must be at least 1");
  if (k_budget < 1) throw std::invalid_argument("projection budget must be at least 1");
  TailPlan plan;
  plan.delta = delta;
  plan.count = count;
  plan.replicas = replicas;
  plan.delta_hat = std::pow(delta / static_cast<double>(count), 1.0 / static_cast<double>(replicas));
  for (int i = 1; i < 1000; ++i) {
    const double eps = 1e-3 * i;
    if (tail_probability(k_budget, eps) <= plan.delta_hat) {
      plan.eps_tail = eps;
      plan.k = min_projections(eps, plan.delta_hat);
      plan.achieved = tail_probability(plan.k, eps);
      return plan;
    }
  }
  throw std::invalid_argument("no feasible eps_tail < 1 for delta_hat=" + std::to_string(plan.delta_hat) +
                              " within k=" + std::to_string(k_budget) + "; minimum achievable tail bound is " +
                              std::to_string(tail_probability(k_budget, 0.999)));
}

std::size_t estimate_count(const std::vector<std::size_t>& layer_sizes) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < layer_sizes.size(); ++i) n += (i + 1) * layer_sizes[i];
  return n;
}

}  // namespace dualnet
