#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dualnet/duallayers.hpp"
#include "random_nets.hpp"

using namespace dualnet;

namespace {

Tensor rows(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor::matrix(r, c, std::move(v)); }

double relu(double z) { return std::max(0.0, z); }
double hardtanh(double z) { return std::clamp(z, -1.0, 1.0); }

// max over a dense grid of z in [l, u] of nu_out f(z) - nu_in z, plus the
// kinks of f that fall inside the interval.
template <class F>
double conjugate_grid(F f, double l, double u, double nu_out, double nu_in) {
  double best = -INFINITY;
  auto probe = [&](double z) { best = std::max(best, nu_out * f(z) - nu_in * z); };
  const int n = 2000;
  for (int i = 0; i <= n; ++i) probe(l + (u - l) * i / n);
  for (double k : {-1.0, 0.0, 1.0})
    if (k > l && k < u) probe(k);
  return best;
}

double h_of(const UnitCoeffs& c, double nu) { return c.weight * std::abs(nu) + c.offset * nu; }

int hardtanh_case(double l, double u) {
  if (u <= -1) return 1;
  if (l >= 1) return 2;
  if (l >= -1 && u <= 1) return 3;
  if (l < -1 && u <= 1) return 4;
  if (l >= -1) return 5;
  return 6;
}

}  // namespace

TEST(DualLinear, IdentityHasZeroObjective) {
  auto d = dual_linear(2, 1, Linear{Tensor::identity(3), Tensor::zeros({3})});
  Tensor nu = rows(1, 3, {1, -2, 3});
  EXPECT_EQ(d->backward(nu)[0].values(), nu.values());
  EXPECT_EQ(d->objective(nu)[0], 0.0);
  EXPECT_TRUE(d->linear());
}

TEST(DualLinear, HandExample) {
  auto d = dual_linear(2, 1, Linear{rows(1, 2, {1, 2}), Tensor::vector({3})});
  Tensor nu = rows(1, 1, {5});
  EXPECT_EQ(d->backward(nu)[0].values(), (std::vector<double>{5, 10}));
  EXPECT_EQ(d->objective(nu)[0], 15.0);
}

TEST(DualLinear, ExactConjugate) {
  // With nu_in = Wᵀnu_out, nu_out·(Wz + b) - nu_in·z = bᵀnu_out for every z.
  std::mt19937_64 rng(7);
  for (int t = 0; t < 50; ++t) {
    Linear lin = testnets::random_linear(3, 2, rng);
    auto d = dual_linear(2, 1, lin);
    Tensor nu = testnets::gaussian({1, 2}, rng, 1.0);
    Tensor nu_in = d->backward(nu)[0];
    const double h = d->objective(nu)[0];
    for (int s = 0; s < 20; ++s) {
      Tensor z = testnets::gaussian_vector(3, rng, 3.0);
      double val = 0;
      for (std::size_t o = 0; o < 2; ++o) {
        double wz = lin.bias[o];
        for (std::size_t i = 0; i < 3; ++i) wz += lin.weight[o * 3 + i] * z[i];
        val += nu[o] * wz;
      }
      for (std::size_t i = 0; i < 3; ++i) val -= nu_in[i] * z[i];
      EXPECT_NEAR(val, h, 1e-9);
    }
  }
}

TEST(DualConv, BackwardIsMaterializedTranspose) {
  std::mt19937_64 rng(11);
  for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 0}, {2, 1}}) {
    Conv2d conv = testnets::random_conv(2, 3, 3, stride, pad, rng);
    NetworkGraph net({2, 6, 6}, {{2, conv, {1}}});
    const std::size_t n_in = 72, n_out = net.size_of(2);
    // Column i of A is the zero-bias response to basis vector e_i.
    std::vector<double> A(n_out * n_in);
    Conv2d nobias = conv;
    nobias.bias = Tensor::zeros({3});
    NetworkGraph lin({2, 6, 6}, {{2, nobias, {1}}});
    for (std::size_t i = 0; i < n_in; ++i) {
      std::vector<double> e(n_in, 0.0);
      e[i] = 1.0;
      Tensor col = lin.forward(Tensor::vector(e));
      for (std::size_t o = 0; o < n_out; ++o) A[o * n_in + i] = col[o];
    }
    auto d = dual_conv(2, 1, conv, {2, 6, 6}, net.shape_of(2));
    Tensor nu = testnets::gaussian({2, n_out}, rng, 1.0);
    Tensor back = d->backward(nu)[0];
    Tensor fwd = d->propagate({testnets::gaussian({2, n_in}, rng, 1.0)});
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t i = 0; i < n_in; ++i) {
        double s = 0;
        for (std::size_t o = 0; o < n_out; ++o) s += nu[r * n_out + o] * A[o * n_in + i];
        EXPECT_NEAR(back[r * n_in + i], s, 1e-12);
      }
    EXPECT_EQ(fwd.shape(), (Shape{2, n_out}));
  }
}

TEST(DualRelu, PaperCases) {
  UnitCoeffs c = relu_unit(-1, 2);
  EXPECT_NEAR(c.slope, 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(h_of(c, 3.0), 2.0, 1e-12);
  UnitCoeffs pos = relu_unit(1, 3);
  EXPECT_EQ(pos.slope, 1.0);
  EXPECT_EQ(h_of(pos, 3.0), 0.0);
  UnitCoeffs neg = relu_unit(-3, -1);
  EXPECT_EQ(neg.slope, 0.0);
  EXPECT_EQ(h_of(neg, 3.0), 0.0);
  // Boundary units go to the stable sets.
  EXPECT_EQ(relu_unit(0, 2).slope, 1.0);
  EXPECT_EQ(relu_unit(-2, 0).slope, 0.0);
}

TEST(DualRelu, LayerMatchesUnits) {
  auto d = dual_relu(3, 2, {Tensor::vector({-1, 1, -3}), Tensor::vector({2, 3, -1})});
  Tensor nu = rows(2, 3, {3, 1, 1, -2, 4, 5});
  Tensor back = d->backward(nu)[0];
  Tensor h = d->objective(nu);
  EXPECT_NEAR(back[0], 2.0, 1e-12);
  EXPECT_NEAR(back[1], 1.0, 1e-12);
  EXPECT_NEAR(back[2], 0.0, 1e-12);
  EXPECT_NEAR(h[0], 2.0, 1e-12);
  EXPECT_NEAR(h[1], 0.0, 1e-12);  // ν = -2 on the unstable unit: [.]₊ is 0
  EXPECT_EQ(d->active_units(), (std::vector<std::size_t>{0}));
  EXPECT_THROW(dual_relu(3, 2, {Tensor::vector({1}), Tensor::vector({0})}), std::invalid_argument);
}

TEST(DualHardtanh, PaperCases) {
  UnitCoeffs sym = hardtanh_unit(-2, 2);
  EXPECT_NEAR(sym.slope, 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(h_of(sym, 1.0), 1.0 / 3.0, 1e-12);
  UnitCoeffs lin = hardtanh_unit(-0.5, 0.5);
  EXPECT_EQ(lin.slope, 1.0);
  EXPECT_EQ(h_of(lin, 1.7), 0.0);
  UnitCoeffs sat = hardtanh_unit(2, 3);
  EXPECT_EQ(sat.slope, 0.0);
  EXPECT_EQ(h_of(sat, 1.7), 1.7);
  EXPECT_THROW(dual_hardtanh(3, 2, {Tensor::vector({1}), Tensor::vector({0})}), std::invalid_argument);
}

TEST(DualHardtanh, SymmetricTwoLineClosedForm) {
  for (double u : {1.5, 2.0, 4.0, 10.0}) {
    UnitCoeffs c = hardtanh_unit(-u, u);
    const double s = 2.0 / (1.0 + u);
    EXPECT_NEAR(c.slope, s, 1e-15);
    for (double nu : {-2.0, 0.5, 3.0}) EXPECT_NEAR(h_of(c, nu), std::abs((1 - s) * nu), 1e-12);
  }
}

TEST(DualActivations, ScalarGridSoundness) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> pick(-4.0, 4.0), nu_dist(-3.0, 3.0);
  int relu_regimes[3] = {0, 0, 0};
  int ht_cases[7] = {0};
  for (int t = 0; t < 10000; ++t) {
    double l = pick(rng), u = pick(rng);
    if (l > u) std::swap(l, u);
    const double nu = nu_dist(rng);
    UnitCoeffs r = relu_unit(l, u);
    relu_regimes[u <= 0 ? 0 : (l >= 0 ? 1 : 2)]++;
    EXPECT_LE(conjugate_grid(relu, l, u, nu, r.slope * nu), h_of(r, nu) + 1e-9) << "relu l=" << l << " u=" << u;
    EXPECT_GE(r.slope, 0.0);
    EXPECT_LE(r.slope, 1.0);
    UnitCoeffs h = hardtanh_unit(l, u);
    ht_cases[hardtanh_case(l, u)]++;
    EXPECT_LE(conjugate_grid(hardtanh, l, u, nu, h.slope * nu), h_of(h, nu) + 1e-9)
        << "hardtanh l=" << l << " u=" << u << " nu=" << nu;
    EXPECT_GE(h.slope, 0.0);
    EXPECT_LE(h.slope, 1.0);
  }
  for (int c : relu_regimes) EXPECT_GT(c, 100);
  for (int c = 1; c <= 6; ++c) EXPECT_GT(ht_cases[c], 50) << "hardtanh case " << c;
}

TEST(DualActivations, DegenerateIntervalIsExact) {
  for (double z : {-2.0, -0.5, 0.5, 2.0}) {
    for (double nu : {-1.5, 2.0}) {
      UnitCoeffs r = relu_unit(z, z);
      EXPECT_NEAR(conjugate_grid(relu, z, z, nu, r.slope * nu), h_of(r, nu), 1e-12);
      UnitCoeffs h = hardtanh_unit(z, z);
      EXPECT_NEAR(conjugate_grid(hardtanh, z, z, nu, h.slope * nu), h_of(h, nu), 1e-12);
    }
  }
}

TEST(DualBatchNorm, IdentityAndHandExample) {
  BatchNormFixed id{Tensor::vector({1}), Tensor::vector({0}), Tensor::vector({0}), Tensor::vector({1}), 0.0};
  auto d = dual_batchnorm(2, 1, id, {1});
  EXPECT_EQ(d->backward(rows(1, 1, {4}))[0][0], 4.0);
  EXPECT_EQ(d->objective(rows(1, 1, {4}))[0], 0.0);

  const double eps_bn = 1e-5;
  BatchNormFixed bn{Tensor::vector({2}), Tensor::vector({1}), Tensor::vector({3}), Tensor::vector({4 - eps_bn}), eps_bn};
  auto e = dual_batchnorm(2, 1, bn, {1});
  EXPECT_NEAR(e->backward(rows(1, 1, {5}))[0][0], 5.0, 1e-12);
  EXPECT_NEAR(e->objective(rows(1, 1, {5}))[0], -10.0, 1e-12);
}

TEST(DualBatchNorm, ExactConjugateOnChannels) {
  std::mt19937_64 rng(8);
  BatchNormFixed bn = testnets::random_bn(2, rng);
  const Shape shape{2, 2, 2};
  NetworkGraph net(shape, {{2, bn, {1}}});
  auto d = dual_batchnorm(2, 1, bn, shape);
  Tensor nu = testnets::gaussian({1, 8}, rng, 1.0);
  Tensor nu_in = d->backward(nu)[0];
  const double h = d->objective(nu)[0];
  for (int s = 0; s < 20; ++s) {
    Tensor z = testnets::gaussian_vector(8, rng, 2.0);
    Tensor out = net.forward(z);
    double val = 0;
    for (std::size_t i = 0; i < 8; ++i) val += nu[i] * out[i] - nu_in[i] * z[i];
    EXPECT_NEAR(val, h, 1e-9);
  }
}

TEST(DualAdd, BroadcastsToEveryInput) {
  auto d = dual_add(4, {2, 3}, 2);
  auto back = d->backward(rows(1, 2, {1, 2}));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].values(), (std::vector<double>{1, 2}));
  EXPECT_EQ(back[1].values(), (std::vector<double>{1, 2}));
  EXPECT_EQ(d->objective(rows(1, 2, {1, 2}))[0], 0.0);
}

TEST(DualAdd, ThreeInputScalarConjugate) {
  // max over (a, b, c) of ν(a + b + c) - νa - νb - νc is 0 = h.
  auto d = dual_add(5, {2, 3, 4}, 1);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> g(-2, 2);
  for (int t = 0; t < 100; ++t) {
    const double nu = g(rng);
    auto back = d->backward(rows(1, 1, {nu}));
    double best = -INFINITY;
    for (int i = 0; i <= 10; ++i)
      for (int j = 0; j <= 10; ++j)
        for (int k = 0; k <= 10; ++k) {
          double a = -2 + 0.4 * i, b = -2 + 0.4 * j, c = -2 + 0.4 * k;
          best = std::max(best, nu * (a + b + c) - back[0][0] * a - back[1][0] * b - back[2][0] * c);
        }
    EXPECT_NEAR(best, d->objective(rows(1, 1, {nu}))[0], 1e-12);
  }
}
