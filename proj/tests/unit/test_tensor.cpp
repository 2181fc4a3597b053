#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "dualnet/autodiff.hpp"
#include "dualnet/ops.hpp"

using namespace dualnet;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor(std::move(shape), std::move(v));
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST(Tensor, RejectsNonFiniteAndBadShape) {
  EXPECT_THROW(Tensor({2}, {1.0}), ShapeError);
  EXPECT_THROW(Tensor::vector({1.0, NAN}), NumericError);
  EXPECT_THROW(Tensor::vector({INFINITY}), NumericError);
}

TEST(Ops, MatmulHandExample) {
  Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  Tensor b = Tensor::matrix(2, 1, {1, 0});
  Tensor c = ops::matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c.values(), (std::vector<double>{1, 3}));
  EXPECT_THROW(ops::matmul(a, Tensor::matrix(3, 1, {1, 2, 3})), ShapeError);
}

TEST(Ops, ReluDefinition) {
  EXPECT_EQ(ops::relu(Tensor::vector({-1, 0, 2})).values(), (std::vector<double>{0, 0, 2}));
  EXPECT_EQ(ops::max_with_zero(Tensor::vector({-3, 4})).values(), (std::vector<double>{0, 4}));
}

TEST(Ops, MedianRow) {
  Tensor m = ops::median_axis(Tensor::matrix(1, 3, {3, 1, 2}), 1);
  EXPECT_EQ(m.values(), (std::vector<double>{2}));
}

TEST(Ops, MedianMatchesSortedSelection) {
  std::mt19937_64 rng(7);
  for (std::size_t len : {1u, 2u, 5u, 6u, 11u, 40u}) {
    Tensor x = random_tensor({4, len}, rng);
    Tensor m = ops::median_axis(x, 1);
    Tensor mt = ops::median_axis(ops::transpose(x), 0);
    for (std::size_t r = 0; r < 4; ++r) {
      std::vector<double> row(x.data().begin() + r * len, x.data().begin() + (r + 1) * len);
      std::sort(row.begin(), row.end());
      EXPECT_EQ(m[r], row[(len - 1) / 2]);
      EXPECT_EQ(mt[r], row[(len - 1) / 2]);
    }
  }
}

TEST(Ops, NonFiniteOutputRejected) {
  Tensor big = Tensor::vector({1e200});
  EXPECT_THROW(ops::mul(big, big), NumericError);
}

TEST(Backward, MedianRoutesToSingleEntry) {
  Tensor x = Tensor::vector({3, 1, 2}, true);
  Tape tape;
  Tensor y;
  {
    auto rec = tape.record();
    y = ops::median_axis(ops::reshape(x, {1, 3}), 1);
  }
  auto g = backward(tape, y);
  EXPECT_EQ(g.at(x.id()).values(), (std::vector<double>{0, 0, 1}));
}

TEST(Backward, EvenMedianTakesLowerMiddle) {
  Tensor x = Tensor::vector({4, 1, 3, 2}, true);
  Tape tape;
  Tensor y;
  {
    auto rec = tape.record();
    y = ops::median_axis(ops::reshape(x, {1, 4}), 1);
  }
  EXPECT_EQ(y.item(), 2.0);
  auto g = backward(tape, y);
  EXPECT_EQ(g.at(x.id()).values(), (std::vector<double>{0, 0, 0, 1}));
}

TEST(Backward, LinearInWeights) {
  Tensor w = Tensor::matrix(1, 2, {0.3, -0.7}, true);
  Tensor x = Tensor::matrix(2, 1, {1, 2});
  Tape tape;
  Tensor y;
  {
    auto rec = tape.record();
    y = ops::sum_all(ops::matmul(w, x));
  }
  auto g = backward(tape, y);
  EXPECT_EQ(g.at(w.id()).values(), (std::vector<double>{1, 2}));
}

TEST(Backward, EmptyAndReplayedTapesRejected) {
  Tape empty;
  EXPECT_THROW(backward(empty, Tensor::scalar(1.0)), std::logic_error);
  Tensor w = Tensor::vector({1.0}, true);
  Tape tape;
  Tensor y;
  {
    auto rec = tape.record();
    y = ops::sum_all(ops::mul(w, w));
  }
  backward(tape, y);
  EXPECT_THROW(backward(tape, y), std::logic_error);
}

TEST(Gradcheck, QuadraticIsExact) {
  auto f = [](const std::vector<Tensor>& p) { return ops::sum_all(ops::mul(p[0], p[0])); };
  auto r = gradcheck(f, {Tensor::vector({3.0})});
  EXPECT_EQ(r.checked, 1u);
  EXPECT_LE(r.max_rel_err, 1e-9);
}

TEST(Gradcheck, SkipsCoordinatesNearKinks) {
  auto f = [](const std::vector<Tensor>& p) { return ops::sum_all(ops::relu(p[0])); };
  auto r = gradcheck(f, {Tensor::vector({1e-4, 0.5})});
  EXPECT_EQ(r.skipped, 1u);
  EXPECT_EQ(r.checked, 1u);
  EXPECT_LE(r.max_rel_err, 1e-9);
}

// Every primitive: <backward(seed), delta> against a directional difference.
TEST(Backward, DirectionalDerivativesOfPrimitives) {
  std::mt19937_64 rng(11);
  using Fn = std::function<Tensor(const std::vector<Tensor>&)>;
  struct Case {
    const char* name;
    std::vector<Shape> shapes;
    Fn f;
  };
  std::vector<Case> cases = {
      {"matmul", {{3, 4}, {4, 2}}, [](auto& p) { return ops::matmul(p[0], p[1]); }},
      {"matmul_t", {{3, 4}, {2, 4}}, [](auto& p) { return ops::matmul(p[0], p[1], true); }},
      {"transpose", {{3, 2}}, [](auto& p) { return ops::transpose(p[0]); }},
      {"conv2d", {{2, 2, 5, 5}, {3, 2, 3, 3}}, [](auto& p) { return ops::conv2d(p[0], p[1], {2, 1}); }},
      {"conv_t", {{2, 3, 3, 3}, {3, 2, 3, 3}},
       [](auto& p) { return ops::conv_transpose2d(p[0], p[1], {2, 1}, 5, 5); }},
      {"add", {{5}, {5}}, [](auto& p) { return ops::add(p[0], p[1]); }},
      {"sub", {{5}, {5}}, [](auto& p) { return ops::sub(p[0], p[1]); }},
      {"mul", {{5}, {5}}, [](auto& p) { return ops::mul(p[0], p[1]); }},
      {"scale", {{5}}, [](auto& p) { return ops::scale(p[0], -2.5); }},
      {"affine", {{3, 4}, {4}, {4}}, [](auto& p) { return ops::affine_diag(p[0], p[1], p[2]); }},
      {"expand", {{3}}, [](auto& p) { return ops::expand_channels(p[0], 4); }},
      {"relu", {{6}}, [](auto& p) { return ops::relu(p[0]); }},
      {"hardtanh", {{6}}, [](auto& p) { return ops::hardtanh(ops::scale(p[0], 2.0)); }},
      {"abs", {{6}}, [](auto& p) { return ops::abs(p[0]); }},
      {"sum0", {{3, 4}}, [](auto& p) { return ops::sum_axis(p[0], 0); }},
      {"sum1", {{3, 4}}, [](auto& p) { return ops::sum_axis(p[0], 1); }},
      {"median0", {{5, 3}}, [](auto& p) { return ops::median_axis(p[0], 0); }},
      {"norm2", {{3, 4}}, [](auto& p) { return ops::norm2_axis(p[0], 1); }},
      {"rms", {{3, 4}}, [](auto& p) { return ops::rms_axis(p[0], 0); }},
      {"scatter", {{4}}, [](auto& p) { return ops::scatter_diag(p[0], {1, 3}); }},
      {"stack", {{3}, {3}}, [](auto& p) { return ops::stack_rows({p[0], p[1]}); }},
      {"xent", {{3, 4}}, [](auto& p) { return ops::cross_entropy(p[0], {0, 3, 1}); }},
  };
  for (const auto& c : cases) {
    std::vector<Tensor> point, params;
    for (const auto& s : c.shapes) point.push_back(random_tensor(s, rng));
    for (const auto& p : point) params.push_back(p.as_parameter());
    Tape tape;
    Tensor y;
    {
      auto rec = tape.record();
      y = c.f(params);
    }
    Tensor seed = random_tensor(y.shape(), rng);
    auto grads = backward(tape, y, seed);
    const double h = 1e-6;
    std::vector<Tensor> plus, minus;
    double analytic = 0.0;
    for (std::size_t t = 0; t < point.size(); ++t) {
      Tensor delta = random_tensor(point[t].shape(), rng);
      std::vector<double> vp = point[t].values(), vm = point[t].values();
      for (std::size_t i = 0; i < vp.size(); ++i) {
        vp[i] += h * delta[i];
        vm[i] -= h * delta[i];
      }
      plus.emplace_back(point[t].shape(), vp);
      minus.emplace_back(point[t].shape(), vm);
      auto it = grads.find(params[t].id());
      if (it != grads.end()) analytic += dot(it->second, delta);
    }
    double numeric = (dot(c.f(plus), seed) - dot(c.f(minus), seed)) / (2 * h);
    EXPECT_NEAR(analytic, numeric, 1e-4 * std::max(1.0, std::abs(numeric))) << c.name;
  }
}

// Brute-force oracle: conv2d equals multiplication by the materialized
// convolution matrix, whose transpose is conv_transpose2d.
TEST(Ops, ConvMatchesMaterializedMatrix) {
  std::mt19937_64 rng(3);
  for (std::size_t size : {4u, 6u, 8u}) {
    for (ops::Conv2dGeometry g : {ops::Conv2dGeometry{1, 0}, ops::Conv2dGeometry{1, 1}, ops::Conv2dGeometry{2, 1}}) {
      const std::size_t C = 2, O = 3, k = 3;
      Tensor w = random_tensor({O, C, k, k}, rng);
      const std::size_t ho = ops::conv_out_size(size, k, g);
      const std::size_t n_in = C * size * size, n_out = O * ho * ho;
      std::vector<double> mat(n_out * n_in, 0.0);
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t oy = 0; oy < ho; ++oy)
          for (std::size_t ox = 0; ox < ho; ++ox)
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t i = 0; i < k; ++i)
                for (std::size_t j = 0; j < k; ++j) {
                  long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
                  long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
                  if (iy < 0 || ix < 0 || iy >= static_cast<long>(size) || ix >= static_cast<long>(size)) continue;
                  std::size_t row = (o * ho + oy) * ho + ox;
                  std::size_t col = (c * size + static_cast<std::size_t>(iy)) * size + static_cast<std::size_t>(ix);
                  mat[row * n_in + col] += w[((o * C + c) * k + i) * k + j];
                }
      Tensor m = Tensor::matrix(n_out, n_in, mat);
      Tensor x = random_tensor({1, C, size, size}, rng);
      Tensor y = ops::conv2d(x, w, g);
      Tensor ref = ops::matmul(m, ops::reshape(x, {n_in, 1}));
      for (std::size_t i = 0; i < n_out; ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
      Tensor v = random_tensor({1, O, ho, ho}, rng);
      Tensor yt = ops::conv_transpose2d(v, w, g, size, size);
      Tensor reft = ops::matmul(ops::transpose(m), ops::reshape(v, {n_out, 1}));
      for (std::size_t i = 0; i < n_in; ++i) EXPECT_NEAR(yt[i], reft[i], 1e-12);
    }
  }
}
