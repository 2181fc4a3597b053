#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "dualnet/certifier.hpp"
#include "random_nets.hpp"

using namespace dualnet;

namespace {

double closed_form_linf(const Linear& lin, const Tensor& x, const std::vector<double>& c, double eps) {
  const std::size_t out = lin.weight.dim(0), in = lin.weight.dim(1);
  double center = 0, dual = 0;
  for (std::size_t o = 0; o < out; ++o) {
    double z = lin.bias[o];
    for (std::size_t i = 0; i < in; ++i) z += lin.weight[o * in + i] * x[i];
    center += c[o] * z;
  }
  for (std::size_t i = 0; i < in; ++i) {
    double s = 0;
    for (std::size_t o = 0; o < out; ++o) s += lin.weight[o * in + i] * c[o];
    dual += std::abs(s);
  }
  return center - eps * dual;
}

}  // namespace

TEST(RobustObjective, LinearNetClosedFormAndAttack) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 20; ++t) {
    Linear lin = testnets::random_linear(2, 3, rng);
    NetworkGraph net({2}, {{2, lin, {1}}});
    Tensor x = testnets::gaussian_vector(2, rng);
    std::vector<double> c = testnets::gaussian_vector(3, rng).values();
    Tensor J = robust_objective(net, x, Ball{BallNorm::linf, 0.2}, Tensor({1, 3}, c));
    const double expect = closed_form_linf(lin, x, c, 0.2);
    EXPECT_NEAR(J[0], expect, 1e-12);
    // Corner search attains the minimum of an affine objective over a box.
    EXPECT_NEAR(attack_oracle(net, x, Ball{BallNorm::linf, 0.2}, Tensor::vector(c)), expect, 1e-12);
  }
}

TEST(RobustObjective, ZeroEpsilonIsPlainObjective) {
  std::mt19937_64 rng(2);
  for (std::size_t inst = 0; inst < 12; ++inst) {
    auto fam = testnets::random_family(inst, rng);
    Tensor x = testnets::gaussian_vector(fam.net.input_size(), rng);
    Tensor out = fam.net.forward(x);
    Tensor C = target_rows(1, fam.net.output_dim());
    Tensor J = robust_objective(fam.net, x, Ball{BallNorm::linf, 0.0}, C);
    for (std::size_t r = 0; r < C.dim(0); ++r) {
      double cz = 0;
      for (std::size_t j = 0; j < out.size(); ++j) cz += C[r * out.size() + j] * out[j];
      EXPECT_NEAR(J[r], cz, 1e-9) << fam.name;
    }
    EXPECT_NEAR(attack_oracle(fam.net, x, Ball{BallNorm::linf, 0.0}, Tensor::vector({0, 1, -1})),
                out[1] - out[2], 1e-12);
  }
}

TEST(RobustObjective, IdentityNetExample) {
  NetworkGraph net({2}, {{2, Linear{Tensor::identity(2), Tensor::zeros({2})}, {1}}});
  Tensor J = robust_objective(net, Tensor::zeros({2}), Ball{BallNorm::linf, 0.1}, Tensor::matrix(1, 2, {1, -1}));
  EXPECT_NEAR(J[0], -0.2, 1e-15);
}

TEST(RobustObjective, MonotoneInEpsilonAndTranslationConsistent) {
  std::mt19937_64 rng(3);
  for (std::size_t inst = 0; inst < 12; ++inst) {
    auto fam = testnets::random_family(inst, rng);
    Tensor x = testnets::gaussian_vector(fam.net.input_size(), rng);
    Tensor C = target_rows(0, fam.net.output_dim());
    double prev = INFINITY;
    for (double eps : {0.0, 0.02, 0.05, 0.1, 0.2, 0.4}) {
      const double j = robust_objective(fam.net, x, Ball{BallNorm::linf, eps}, C)[0];
      EXPECT_LE(j, prev + 1e-12) << fam.name;
      prev = j;
    }
    // Shift the output bias by t: every J shifts by cᵀt.
    auto layers = fam.net.layers();
    auto& last = std::get<Linear>(layers.back().kind);
    std::vector<double> t = testnets::gaussian_vector(fam.net.output_dim(), rng).values();
    std::vector<double> b = last.bias.values();
    for (std::size_t j = 0; j < b.size(); ++j) b[j] += t[j];
    last.bias = Tensor::vector(b);
    NetworkGraph shifted(fam.net.input_shape(), layers);
    const Ball ball{BallNorm::linf, 0.1};
    Tensor J0 = robust_objective(fam.net, x, ball, C), J1 = robust_objective(shifted, x, ball, C);
    for (std::size_t r = 0; r < C.dim(0); ++r) {
      double ct = 0;
      for (std::size_t j = 0; j < t.size(); ++j) ct += C[r * t.size() + j] * t[j];
      EXPECT_NEAR(J1[r], J0[r] + ct, 1e-9) << fam.name;
    }
  }
}

TEST(RobustObjective, SoundAgainstAttackOnRandomInstances) {
  std::mt19937_64 rng(4);
  AttackBudget budget;
  budget.steps = 30;
  budget.restarts = 2;
  for (std::size_t inst = 0; inst < 60; ++inst) {
    auto fam = testnets::random_family(inst, rng);
    Tensor x = testnets::gaussian_vector(fam.net.input_size(), rng);
    const Ball ball{inst % 3 == 2 ? BallNorm::l2 : BallNorm::linf, 0.1 + 0.05 * static_cast<double>(inst % 5)};
    Tensor c = testnets::gaussian_vector(fam.net.output_dim(), rng);
    const double J = robust_objective(fam.net, x, ball, ops::reshape(c, {1, c.size()}))[0];
    budget.seed = inst;
    EXPECT_LE(J, attack_oracle(fam.net, x, ball, c, budget) + 1e-7) << fam.name;
  }
}

TEST(Certify, MarginsAndBoundary) {
  // f(x) = (x₀, -x₀): class 0 when x₀ > 0.
  NetworkGraph net({1}, {{2, Linear{Tensor::matrix(2, 1, {1, -1}), Tensor::zeros({2})}, {1}}});
  Certificate far = certify(net, Tensor::vector({5.0}), Ball{BallNorm::linf, 0.1});
  EXPECT_TRUE(far.certified);
  EXPECT_EQ(far.predicted, 0);
  EXPECT_NEAR(far.min_objective, 2 * 5.0 - 2 * 0.1, 1e-12);
  EXPECT_EQ(far.objective[0], 0.0);

  Certificate edge = certify(net, Tensor::vector({0.0}), Ball{BallNorm::linf, 0.1});
  EXPECT_FALSE(edge.certified);  // tie at the boundary
  Certificate near = certify(net, Tensor::vector({0.05}), Ball{BallNorm::linf, 0.1});
  EXPECT_FALSE(near.certified);
  EXPECT_LE(near.min_objective, 0.0);

  Certificate zero = certify(net, Tensor::vector({-0.3}), Ball{BallNorm::linf, 0.0});
  EXPECT_TRUE(zero.certified);
  EXPECT_EQ(zero.predicted, 1);
  EXPECT_EQ(zero.mode, "exact");
}

TEST(Certify, SlackIsRequired) {
  NetworkGraph net({1}, {{2, Linear{Tensor::matrix(2, 1, {1, -1}), Tensor::zeros({2})}, {1}}});
  CertifyOptions o;
  Certificate c = certify(net, Tensor::vector({2.5e-7}), Ball{BallNorm::linf, 0.0}, o);
  EXPECT_FALSE(c.certified);  // J = 5e-7 <= 1e-6
  o.slack = 1e-7;
  EXPECT_TRUE(certify(net, Tensor::vector({2.5e-7}), Ball{BallNorm::linf, 0.0}, o).certified);
}

TEST(Certify, HighProbImpliesExact) {
  std::mt19937_64 rng(5);
  NetworkGraph net = testnets::mlp({4, 10, 10, 3}, rng);
  std::size_t implied = 0, fired = 0;
  const std::size_t trials = 200;
  for (std::size_t t = 0; t < trials; ++t) {
    Tensor x = testnets::gaussian_vector(4, rng);
    const Ball ball{BallNorm::linf, 0.02};
    Certificate hp = certify_high_prob(net, x, ball, 0.01, 10, t);
    Certificate ex = certify(net, x, ball);
    ASSERT_TRUE(hp.plan.has_value());
    if (hp.certified) {
      ++fired;
      implied += ex.certified;
    }
  }
  EXPECT_GT(fired, 0u);
  EXPECT_GE(static_cast<double>(implied), 0.99 * static_cast<double>(fired));
}

TEST(Certify, LooseHighProbPlanIsFeasibleAndWeaker) {
  std::mt19937_64 rng(6);
  NetworkGraph net = testnets::mlp({3, 6, 3}, rng);
  for (int t = 0; t < 50; ++t) {
    Tensor x = testnets::gaussian_vector(3, rng);
    Certificate hp = certify_high_prob(net, x, Ball{BallNorm::linf, 0.05}, 0.99, 1, static_cast<std::uint64_t>(t));
    ASSERT_TRUE(hp.plan.has_value());
    EXPECT_LE(hp.plan->achieved, hp.plan->delta_hat);
    EXPECT_LE(hp.plan->k, 200u);
    if (hp.certified) EXPECT_TRUE(certify(net, x, Ball{BallNorm::linf, 0.05}).certified);
  }
}

TEST(RobustError, ZeroEpsilonMatchesStandardAndGrowsWithEpsilon) {
  std::mt19937_64 rng(7);
  NetworkGraph net = testnets::mlp({3, 8, 3}, rng);
  Tensor xs = testnets::gaussian({40, 3}, rng, 1.0);
  std::vector<int> labels(40);
  for (auto& y : labels) y = static_cast<int>(rng() % 3);
  RobustErrorResult r0 = robust_error(net, xs, labels, Ball{BallNorm::linf, 0.0});
  EXPECT_DOUBLE_EQ(r0.robust_error, r0.standard_error);
  double prev = 0;
  for (double eps : {0.0, 0.05, 0.1, 0.2, 0.5}) {
    RobustErrorResult r = robust_error(net, xs, labels, Ball{BallNorm::linf, eps});
    EXPECT_GE(r.robust_error, prev);
    EXPECT_GE(r.robust_error, r.standard_error);
    prev = r.robust_error;
  }
  EXPECT_THROW(robust_error(net, Tensor::zeros({0, 3}), {}, Ball{}), std::invalid_argument);
}

TEST(RobustError, ThreadCountDoesNotChangeResult) {
  std::mt19937_64 rng(8);
  NetworkGraph net = testnets::small_conv(1, 4, 3, rng);
  Tensor xs = testnets::gaussian({16, 16}, rng, 1.0);
  std::vector<int> labels(16, 1);
  CertifyOptions o;
  o.mode = BoundMode::median;
  o.seed = 4;
  RobustErrorResult a = robust_error(net, xs, labels, Ball{BallNorm::linf, 0.05}, o, 1);
  RobustErrorResult b = robust_error(net, xs, labels, Ball{BallNorm::linf, 0.05}, o, 4);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(a.certificates[i].objective, b.certificates[i].objective);
}

TEST(EpsilonConversion, Examples) {
  EXPECT_NEAR(epsilon_l2_equivalent(784, 0.1), 1.58, 0.005);
  EXPECT_NEAR(epsilon_l2_equivalent(std::numbers::pi, 1.0), 1.0, 1e-15);
  EXPECT_EQ(epsilon_l2_equivalent(10, 0.0), 0.0);
  EXPECT_THROW(epsilon_l2_equivalent(0.5, 0.1), std::invalid_argument);
}
