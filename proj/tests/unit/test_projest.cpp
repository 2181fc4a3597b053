#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dualnet/projest.hpp"
#include "random_nets.hpp"

using namespace dualnet;

namespace {

double l1(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += std::abs(x);
  return s;
}

}  // namespace

TEST(Sampling, CauchyIsDeterministicPerSeed) {
  Tensor a = sample_cauchy(7, 5, 42), b = sample_cauchy(7, 5, 42), c = sample_cauchy(7, 5, 43);
  EXPECT_EQ(a.values(), b.values());
  EXPECT_NE(a.values(), c.values());
  EXPECT_EQ(counter_uniform(9, 3), counter_uniform(9, 3));
  EXPECT_NE(derive_seed(1, 2), derive_seed(2, 1));
}

TEST(Sampling, CauchyMedianAndCdf) {
  Tensor s = sample_cauchy(1000, 1000, 7);
  std::vector<double> abs_v(s.size());
  std::size_t below_one = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    abs_v[i] = std::abs(s[i]);
    below_one += s[i] <= 1.0;
  }
  std::nth_element(abs_v.begin(), abs_v.begin() + static_cast<long>(abs_v.size() / 2), abs_v.end());
  EXPECT_NEAR(abs_v[abs_v.size() / 2], 1.0, 0.01);
  EXPECT_NEAR(static_cast<double>(below_one) / static_cast<double>(s.size()), 0.75, 0.01);
}

TEST(Sampling, NormalMoments) {
  Tensor s = sample_normal(500, 400, 3);
  double mean = 0, sq = 0;
  for (double v : s.values()) {
    mean += v;
    sq += v * v;
  }
  mean /= static_cast<double>(s.size());
  sq /= static_cast<double>(s.size());
  EXPECT_NEAR(mean, 0.0, 0.01);
  EXPECT_NEAR(sq, 1.0, 0.01);
}

namespace {

double within_ten_percent(std::size_t r, std::uint64_t seeds) {
  std::size_t good = 0;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    Tensor est = estimate_l1(Tensor::matrix(1, 4, {1, 0, 0, 0}), {r, ProjectionNorm::l1_cauchy, seed});
    good += std::abs(est[0] - 1.0) <= 0.1;
  }
  return static_cast<double>(good) / static_cast<double>(seeds);
}

}  // namespace

TEST(EstimateL1, UnitRowConvergesForLargeR) {
  // Order-statistic probabilities that the sample median of r half-Cauchy
  // draws lies in [0.9, 1.1]: 0.95556 at r = 1001, 0.99097 at r = 1701.
  // Bands are four binomial standard deviations over 1000 seeds.
  EXPECT_NEAR(within_ten_percent(1001, 1000), 0.95556, 0.026);
  EXPECT_NEAR(within_ten_percent(1701, 1000), 0.99097, 0.012);
}

TEST(EstimateL1, ZeroAndHomogeneity) {
  ProjectionPlan plan{25, ProjectionNorm::l1_cauchy, 5};
  EXPECT_EQ(estimate_l1(Tensor::zeros({2, 6}), plan).values(), (std::vector<double>{0, 0}));
  std::mt19937_64 rng(1);
  Tensor nu = testnets::gaussian({3, 6}, rng, 1.0);
  Tensor base = estimate_l1(nu, plan);
  for (double a : {-2.5, 0.5, 3.0}) {
    std::vector<double> scaled = nu.values();
    for (auto& v : scaled) v *= a;
    Tensor est = estimate_l1(Tensor({3, 6}, scaled), plan);
    for (std::size_t r = 0; r < 3; ++r) EXPECT_NEAR(est[r], std::abs(a) * base[r], 1e-12);
  }
}

TEST(EstimateL1, RejectsZeroProjections) {
  EXPECT_THROW(estimate_l1(Tensor::zeros({1, 2}), {0, ProjectionNorm::l1_cauchy, 1}), std::invalid_argument);
}

TEST(EstimateL2, UnitRowAndZero) {
  Tensor est = estimate_l2(Tensor::matrix(1, 3, {1, 0, 0}), {20000, ProjectionNorm::l2_normal, 11});
  EXPECT_NEAR(est[0], 1.0, 0.02);
  EXPECT_EQ(estimate_l2(Tensor::zeros({1, 3}), {10, ProjectionNorm::l2_normal, 1})[0], 0.0);
}

TEST(EstimateL2, RotationInvariantInDistribution) {
  // ν = (3, 4) and its rotation (5, 0) share the same norm; compare
  // estimator moments over seeds.
  double m1 = 0, m2 = 0, s1 = 0, s2 = 0;
  const int trials = 4000;
  for (int t = 0; t < trials; ++t) {
    const auto seed = static_cast<std::uint64_t>(t);
    const double a = estimate_l2(Tensor::matrix(1, 2, {3, 4}), {10, ProjectionNorm::l2_normal, seed})[0];
    const double b = estimate_l2(Tensor::matrix(1, 2, {5, 0}), {10, ProjectionNorm::l2_normal, seed + 100000})[0];
    m1 += a;
    m2 += b;
    s1 += a * a;
    s2 += b * b;
  }
  m1 /= trials;
  m2 /= trials;
  EXPECT_NEAR(m1, m2, 0.05);
  EXPECT_NEAR(s1 / trials, 25.0, 0.5);
  EXPECT_NEAR(s2 / trials, 25.0, 0.5);
}

TEST(ReluTerm, EmptyUnstableSetGivesZero) {
  Tensor nu = Tensor::matrix(1, 3, {1, -2, 3});
  Tensor lower = Tensor::vector({0.5, -3, 1}), upper = Tensor::vector({1, -1, 2});
  ProjectionPlan plan{15, ProjectionNorm::l1_cauchy, 2};
  EXPECT_EQ(estimate_relu_term(nu, lower, upper, plan)[0], 0.0);
  EXPECT_EQ(exact_relu_term(nu, lower, upper)[0], 0.0);
}

TEST(ReluTerm, ScalarCaseConverges) {
  Tensor nu = Tensor::matrix(1, 1, {2});
  Tensor lower = Tensor::vector({-1}), upper = Tensor::vector({1});
  EXPECT_EQ(exact_relu_term(nu, lower, upper)[0], -2.0);
  const double est = estimate_relu_term(nu, lower, upper, {2001, ProjectionNorm::l1_cauchy, 3})[0];
  EXPECT_NEAR(est, -2.0, 0.2);
}

TEST(ReluTerm, NonPositiveNuGivesZero) {
  Tensor nu = Tensor::matrix(1, 1, {-2});
  Tensor lower = Tensor::vector({-1}), upper = Tensor::vector({1});
  EXPECT_EQ(exact_relu_term(nu, lower, upper)[0], 0.0);
  const double est = estimate_relu_term(nu, lower, upper, {2001, ProjectionNorm::l1_cauchy, 3})[0];
  EXPECT_NEAR(est, 0.0, 0.1);
}

TEST(ReluTerm, ExactTermMatchesDefinition) {
  std::mt19937_64 rng(4);
  Tensor nu = testnets::gaussian({3, 5}, rng, 1.0);
  Tensor lower = Tensor::vector({-1, 0.5, -2, -0.5, -3}), upper = Tensor::vector({1, 2, -1, 0.5, 1});
  Tensor t = exact_relu_term(nu, lower, upper);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0;
    for (std::size_t k = 0; k < 5; ++k)
      if (lower[k] < 0 && upper[k] > 0) s += lower[k] * std::max(0.0, nu[r * 5 + k]);
    EXPECT_NEAR(t[r], s, 1e-12);
  }
}

TEST(GeoEstimate, ZeroMonotoneAndCoverage) {
  EXPECT_EQ(geo_estimate(Tensor::zeros({10, 2}), 0.2).values(), (std::vector<double>{0, 0}));
  const std::size_t k = 50;
  Tensor P = sample_cauchy(4 * k, 3, 17);
  Tensor three = maxgeo_estimate(Tensor({3 * k, 3}, std::vector<double>(P.data().begin(), P.data().begin() + 3 * k * 3)),
                                 k, 3, 0.2);
  Tensor four = maxgeo_estimate(P, k, 4, 0.2);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_GE(four[j], three[j]);

  // One replica: P(geo < ‖ν‖₁) <= exp(-k D(eps)).
  std::mt19937_64 rng(5);
  Tensor nu = testnets::gaussian({1, 8}, rng, 1.0);
  const double truth = l1(nu.values());
  const double eps = 0.3;
  const std::size_t kk = 40;
  const double bound = tail_probability(kk, eps);
  int fails = 0;
  const int trials = 4000;
  for (int t = 0; t < trials; ++t) {
    Tensor R = sample_cauchy(8, kk, static_cast<std::uint64_t>(t));
    std::vector<double> proj(kk);
    for (std::size_t c = 0; c < kk; ++c)
      for (std::size_t i = 0; i < 8; ++i) proj[c] += nu[i] * R[i * kk + c];
    fails += geo_estimate(Tensor({kk, 1}, proj), eps)[0] < truth;
  }
  EXPECT_LE(static_cast<double>(fails) / trials, bound);
}

TEST(TailPlan, SimpleCases) {
  TailPlan p = plan_tail(0.5, 1, 1);
  EXPECT_DOUBLE_EQ(p.delta_hat, 0.5);
  EXPECT_LE(p.achieved, p.delta_hat);
  EXPECT_GT(p.eps_tail, 0.0);
  EXPECT_LT(p.eps_tail, 1.0);
  double prev = 0;
  for (std::size_t m : {1, 2, 4, 8, 16}) {
    TailPlan q = plan_tail(0.01, 6572, m);
    EXPECT_GT(q.delta_hat, prev);
    EXPECT_LT(q.delta_hat, 1.0);
    prev = q.delta_hat;
  }
}

TEST(TailPlan, MnistExample) {
  TailPlan p = plan_tail(0.01, 6572, 10);
  EXPECT_NEAR(p.delta_hat, 0.26, 0.01);
  EXPECT_NEAR(static_cast<double>(p.k), 200.0, 10.0);
  EXPECT_LE(tail_probability(200, 0.22), p.delta_hat);
  EXPECT_LE(p.achieved, p.delta_hat);
  EXPECT_EQ(min_projections(0.22, p.delta_hat), 108u);
}

TEST(TailPlan, RateIsPositiveAndIncreasing) {
  double prev = 0;
  for (double e = 0.05; e < 0.95; e += 0.05) {
    const double d = tail_rate(e);
    EXPECT_GT(d, prev);
    prev = d;
  }
  EXPECT_THROW(plan_tail(0.0, 10, 1), std::invalid_argument);
  EXPECT_THROW(plan_tail(0.01, 10, 0), std::invalid_argument);
}
