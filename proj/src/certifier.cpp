#include "dualnet/certifier.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "dualnet/autodiff.hpp"
#include "dualnet/ops.hpp"
#include "dualnet/parallel.hpp"

namespace dualnet {

std::string mode_label(const CertifyOptions& o) {
  std::ostringstream os;
  switch (o.mode) {
    case BoundMode::exact:
      os << "exact";
      break;
    case BoundMode::median:
      os << "median(r=" << o.r << ",seed=" << o.seed << ")";
      break;
    case BoundMode::high_prob:
      os << "high_prob(delta=" << o.delta << ",m=" << o.replicas << ",k=" << o.k_budget << ")";
      break;
  }
  return os.str();
}

Tensor target_rows(int y, std::size_t classes) {
  if (y < 0 || static_cast<std::size_t>(y) >= classes) throw std::invalid_argument("class index out of range");
  std::vector<double> v;
  for (std::size_t j = 0; j < classes; ++j) {
    if (static_cast<int>(j) == y) continue;
    std::vector<double> row(classes, 0.0);
    row[static_cast<std::size_t>(y)] = 1.0;
    row[j] = -1.0;
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor({classes - 1, classes}, std::move(v));
}

Tensor all_target_rows(int y, std::size_t classes) {
  if (y < 0 || static_cast<std::size_t>(y) >= classes) throw std::invalid_argument("class index out of range");
  std::vector<double> v(classes * classes, 0.0);
  for (std::size_t j = 0; j < classes; ++j) {
    if (static_cast<int>(j) == y) continue;
    v[j * classes + static_cast<std::size_t>(y)] = 1.0;
    v[j * classes + j] = -1.0;
  }
  return Tensor({classes, classes}, std::move(v));
}

namespace {

std::optional<TailPlan> high_prob_plan(const NetworkGraph& net, const CertifyOptions& o) {
  const std::size_t count = high_prob_estimate_count(net);
  if (count == 0) return std::nullopt;
  return plan_tail(o.delta, count, o.replicas, o.k_budget);
}

Tensor objective_with_plan(const NetworkGraph& net, const Tensor& x, const Ball& ball, const Tensor& C,
                           const CertifyOptions& options, const std::optional<TailPlan>& plan) {
  switch (options.mode) {
    case BoundMode::exact:
      return objective_backward(build_dual(net, x, ball), C);
    case BoundMode::median:
      return objective_backward(build_dual(net, x, ball, EstimatorConfig::median(options.r, options.seed)), C);
    case BoundMode::high_prob:
      if (!plan) return objective_backward(build_dual(net, x, ball), C);
      return objective_backward(build_dual(net, x, ball, EstimatorConfig::high_prob(*plan, options.seed)), C);
  }
  throw std::logic_error("unknown bound mode");
}

Certificate certify_with_plan(const NetworkGraph& net, const Tensor& x, const Ball& ball,
                              const CertifyOptions& options, const std::optional<TailPlan>& plan,
                              std::size_t example_id) {
  Tensor logits = net.forward(x.detach());
  const std::size_t classes = logits.size();
  Certificate cert;
  cert.example_id = example_id;
  cert.predicted = argmax(logits.data());
  cert.mode = mode_label(options);
  cert.slack = options.slack;
  cert.plan = plan;
  bool tie = false;
  for (std::size_t j = 0; j < classes; ++j) {
    if (static_cast<int>(j) != cert.predicted && logits[j] == logits[static_cast<std::size_t>(cert.predicted)]) tie = true;
  }
  cert.objective.assign(classes, 0.0);
  cert.min_objective = std::numeric_limits<double>::infinity();
  if (classes > 1) {
    Tensor J = objective_with_plan(net, x.detach(), ball, target_rows(cert.predicted, classes), options, plan);
    std::size_t row = 0;
    for (std::size_t j = 0; j < classes; ++j) {
      if (static_cast<int>(j) == cert.predicted) continue;
      cert.objective[j] = J[row++];
      cert.min_objective = std::min(cert.min_objective, cert.objective[j]);
    }
  }
  cert.certified = !tie && cert.min_objective > options.slack;
  return cert;
}

}  // namespace

Tensor robust_objective(const NetworkGraph& net, const Tensor& x, const Ball& ball, const Tensor& C,
                        const CertifyOptions& options) {
  std::optional<TailPlan> plan;
  if (options.mode == BoundMode::high_prob) plan = high_prob_plan(net, options);
  return objective_with_plan(net, x, ball, C, options, plan);
}

Certificate certify(const NetworkGraph& net, const Tensor& x, const Ball& ball, const CertifyOptions& options,
                    std::size_t example_id) {
  std::optional<TailPlan> plan;
  if (options.mode == BoundMode::high_prob) plan = high_prob_plan(net, options);
  return certify_with_plan(net, x, ball, options, plan, example_id);
}

Certificate certify_high_prob(const NetworkGraph& net, const Tensor& x, const Ball& ball, double delta,
                              std::size_t replicas, std::uint64_t seed, std::size_t k_budget,
                              std::size_t example_id) {
  CertifyOptions o;
  o.mode = BoundMode::high_prob;
  o.delta = delta;
  o.replicas = replicas;
  o.seed = seed;
  o.k_budget = k_budget;
  return certify(net, x, ball, o, example_id);
}

RobustErrorResult robust_error(const NetworkGraph& net, const Tensor& xs, const std::vector<int>& labels,
                               const Ball& ball, const CertifyOptions& options, std::size_t threads) {
  if (xs.rank() != 2 || xs.dim(0) != labels.size()) throw ShapeError("robust_error: examples and labels differ");
  if (labels.empty()) throw std::invalid_argument("robust_error: empty dataset");
  std::optional<TailPlan> plan;
  if (options.mode == BoundMode::high_prob) plan = high_prob_plan(net, options);
  const std::size_t n = labels.size(), d = xs.dim(1);
  RobustErrorResult result;
  result.n = n;
  result.certificates.resize(n);
  parallel_for(n, threads, [&](std::size_t i) {
    std::vector<double> row(xs.data().begin() + static_cast<long>(i * d), xs.data().begin() + static_cast<long>((i + 1) * d));
    Certificate c = certify_with_plan(net, Tensor::vector(std::move(row)), ball, options, plan, i);
    c.label = labels[i];
    result.certificates[i] = std::move(c);
  });
  std::size_t robust = 0, standard = 0;
  for (const auto& c : result.certificates) {
    const bool wrong = c.predicted != c.label;
    standard += wrong;
    robust += wrong || !c.certified;
  }
  result.robust_error = static_cast<double>(robust) / static_cast<double>(n);
  result.standard_error = static_cast<double>(standard) / static_cast<double>(n);
  return result;
}

namespace {

std::vector<double> project(std::vector<double> delta, const Ball& ball) {
  if (ball.norm == BallNorm::linf) {
    for (auto& v : delta) v = std::clamp(v, -ball.eps, ball.eps);
  } else {
    double n = 0;
    for (double v : delta) n += v * v;
    n = std::sqrt(n);
    if (n > ball.eps && n > 0) {
      for (auto& v : delta) v *= ball.eps / n;
    }
  }
  return delta;
}

}  // namespace

double attack_oracle(const NetworkGraph& net, const Tensor& x, const Ball& ball, const Tensor& c,
                     const AttackBudget& budget) {
  if (c.size() != net.output_dim()) throw ShapeError("attack_oracle: objective vector has the wrong length");
  const std::size_t d = x.size();
  const std::vector<double> x0 = x.values();
  Tensor crow = ops::reshape(c.detach(), {1, c.size()});

  auto value = [&](const std::vector<double>& delta) {
    std::vector<double> p(d);
    for (std::size_t i = 0; i < d; ++i) p[i] = x0[i] + delta[i];
    Tensor out = net.forward(Tensor::vector(std::move(p)));
    double s = 0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * c[i];
    return s;
  };
  auto gradient = [&](const std::vector<double>& delta, double& f) {
    std::vector<double> p(d);
    for (std::size_t i = 0; i < d; ++i) p[i] = x0[i] + delta[i];
    Tensor xp = Tensor::vector(std::move(p), true);
    Tape tape;
    Tensor obj;
    {
      auto rec = tape.record();
      obj = ops::matmul(crow, ops::reshape(net.forward(xp), {c.size(), 1}));
    }
    f = obj.item();
    if (tape.empty()) return std::vector<double>(d, 0.0);
    auto g = backward(tape, obj);
    auto it = g.find(xp.id());
    return it == g.end() ? std::vector<double>(d, 0.0) : it->second.values();
  };

  double best = value(std::vector<double>(d, 0.0));
  if (ball.eps == 0.0) return best;

  std::mt19937_64 rng(budget.seed);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  const double step = 2.5 * ball.eps / static_cast<double>(std::max<std::size_t>(budget.steps, 1));
  for (std::size_t r = 0; r < budget.restarts; ++r) {
    std::vector<double> delta(d, 0.0);
    if (r > 0) {
      for (auto& v : delta) v = unif(rng) * ball.eps;
      delta = project(std::move(delta), ball);
    }
    for (std::size_t s = 0; s <= budget.steps; ++s) {
      double f = 0;
      std::vector<double> g = gradient(delta, f);
      best = std::min(best, f);
      if (s == budget.steps) break;
      if (ball.norm == BallNorm::linf) {
        for (std::size_t i = 0; i < d; ++i) delta[i] -= step * (g[i] > 0 ? 1.0 : (g[i] < 0 ? -1.0 : 0.0));
      } else {
        double gn = 0;
        for (double v : g) gn += v * v;
        gn = std::sqrt(gn);
        if (gn == 0) break;
        for (std::size_t i = 0; i < d; ++i) delta[i] -= step * g[i] / gn;
      }
      delta = project(std::move(delta), ball);
    }
  }

  if (d <= budget.grid_dim && budget.grid_points >= 2) {
    const std::size_t g = budget.grid_points;
    std::size_t total = 1;
    for (std::size_t i = 0; i < d; ++i) total *= g;
    std::vector<double> delta(d);
    for (std::size_t idx = 0; idx < total; ++idx) {
      std::size_t rest = idx;
      for (std::size_t i = 0; i < d; ++i) {
        delta[i] = ball.eps * (-1.0 + 2.0 * static_cast<double>(rest % g) / static_cast<double>(g - 1));
        rest /= g;
      }
      best = std::min(best, value(project(delta, ball)));
    }
  }
  return best;
}

double epsilon_l2_equivalent(double d, double eps_inf) {
  if (!(d >= 1.0)) throw std::invalid_argument("dimension must be at least 1");
  if (!(eps_inf >= 0.0)) throw std::invalid_argument("eps_inf must be nonnegative");
  return std::sqrt(d / std::numbers::pi) * eps_inf;
}

}  // namespace dualnet
