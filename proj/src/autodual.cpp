#include "dualnet/autodual.hpp"

#include <algorithm>
#include <optional>
#include <stdexcept>

#include "dualnet/ops.hpp"

namespace dualnet {

EstimatorConfig EstimatorConfig::median(std::size_t r, std::uint64_t seed) {
  EstimatorConfig c;
  c.mode = BoundMode::median;
  c.r = r;
  c.seed = seed;
  return c;
}

EstimatorConfig EstimatorConfig::high_prob(const TailPlan& plan, std::uint64_t seed) {
  EstimatorConfig c;
  c.mode = BoundMode::high_prob;
  c.tail = plan;
  c.seed = seed;
  return c;
}

namespace {

// Rows of one dual pipe at every layer it has reached so far.
struct Pipe {
  int origin = 1;
  bool shadow = false;          // exact copy used only for auditing
  bool lazy_identity = false;   // rows at layer 1 are the identity
  std::map<int, Tensor> rows;
};

Tensor column_norm(const Tensor& rows, bool input_term, BallNorm norm, const EstimatorConfig& cfg) {
  const bool l2 = input_term && norm == BallNorm::l2;
  switch (cfg.mode) {
    case BoundMode::exact:
      return l2 ? ops::norm2_axis(rows, 0) : ops::sum_axis(ops::abs(rows), 0);
    case BoundMode::median:
      return l2 ? ops::rms_axis(rows, 0) : ops::median_axis(ops::abs(rows), 0);
    case BoundMode::high_prob:
      return maxgeo_estimate(rows, cfg.tail.k, cfg.tail.replicas, cfg.tail.eps_tail);
  }
  throw std::logic_error("unknown bound mode");
}

Tensor exact_l1_columns(const Tensor& rows) { return ops::sum_axis(ops::abs(rows), 0); }

void validate_config(const EstimatorConfig& cfg, const Ball& ball) {
  if (!(ball.eps >= 0.0)) throw std::invalid_argument("eps must be nonnegative");
  if (cfg.mode == BoundMode::median && cfg.r < 1) throw std::invalid_argument("projection count r must be at least 1");
  if (cfg.mode == BoundMode::high_prob) {
    if (ball.norm != BallNorm::linf) {
      throw std::invalid_argument("high-probability bounds are available for linf balls only");
    }
    if (cfg.tail.k < 1 || cfg.tail.replicas < 1 || !(cfg.tail.eps_tail > 0.0 && cfg.tail.eps_tail < 1.0)) {
      throw std::invalid_argument("high-probability mode needs a feasible tail plan");
    }
  }
}

}  // namespace

DualNetwork build_dual(const NetworkGraph& net, const Tensor& x, const Ball& ball, const EstimatorConfig& cfg) {
  validate_config(cfg, ball);
  if (x.size() != net.input_size()) {
    throw ShapeError("build_dual: anchor has " + std::to_string(x.size()) + " entries, network expects " +
                     std::to_string(net.input_size()));
  }
  DualNetwork d(net);
  d.ball_ = ball;
  d.x_ = ops::reshape(x, {x.size()});
  d.config_ = cfg;

  const int k = net.output_id();
  int limit = 0;
  std::vector<int> last_use(static_cast<std::size_t>(k) + 1, 0);
  for (const auto& spec : net.layers()) {
    if (is_activation(spec.kind)) limit = std::max(limit, spec.inputs.front());
    for (int j : spec.inputs) last_use[static_cast<std::size_t>(j)] = std::max(last_use[static_cast<std::size_t>(j)], spec.id);
  }
  if (cfg.pipe_to_output) limit = k;
  last_use[static_cast<std::size_t>(k)] = k + 1;

  const std::size_t n1 = net.input_size();
  const std::size_t cols_hp = cfg.tail.k * cfg.tail.replicas;
  const bool audit = cfg.audit && cfg.mode == BoundMode::high_prob;

  std::vector<Pipe> pipes;
  auto add_exact_input = [&](bool shadow) {
    Pipe p;
    p.origin = 1;
    p.shadow = shadow;
    p.lazy_identity = true;
    pipes.push_back(std::move(p));
  };
  if (limit >= 1) {
    if (cfg.mode == BoundMode::exact) {
      add_exact_input(false);
    } else {
      Pipe p;
      p.origin = 1;
      const std::uint64_t s = derive_seed(cfg.seed, 1);
      if (cfg.mode == BoundMode::median) {
        p.rows[1] = sample_projection(cfg.r, n1,
                                      ball.norm == BallNorm::linf ? ProjectionNorm::l1_cauchy : ProjectionNorm::l2_normal, s);
      } else {
        p.rows[1] = sample_cauchy(cols_hp, n1, s);
      }
      pipes.push_back(std::move(p));
      if (audit) add_exact_input(true);
    }
  }

  std::vector<Tensor> center(static_cast<std::size_t>(k) + 1);
  center[1] = ops::reshape(d.x_, {1, n1});

  auto rows_at = [](Pipe& p, int id) -> std::optional<Tensor> {
    auto it = p.rows.find(id);
    if (it != p.rows.end()) return it->second;
    return std::nullopt;
  };
  auto materialize = [&](Pipe& p, int id) -> std::optional<Tensor> {
    if (id == 1 && p.lazy_identity) return Tensor::identity(n1);
    return rows_at(p, id);
  };

  for (const auto& spec : net.layers()) {
    const int i = spec.id;
    std::unique_ptr<DualLayer> layer;
    if (is_activation(spec.kind)) {
      const int j = spec.inputs.front();
      const std::size_t nj = net.size_of(j);
      std::vector<Tensor> radius;
      std::map<int, Tensor> estimates;
      for (auto& p : pipes) {
        if (p.shadow) continue;
        Tensor term;
        if (j == 1 && p.lazy_identity) {
          term = Tensor::full({nj}, 1.0);
        } else {
          auto rows = rows_at(p, j);
          if (!rows) continue;
          term = column_norm(*rows, p.origin == 1, ball.norm, cfg);
        }
        estimates[p.origin] = term;
        radius.push_back(p.origin == 1 ? ops::scale(term, ball.eps) : term);
      }
      if (audit) {
        for (auto& p : pipes) {
          if (!p.shadow) continue;
          auto rows = materialize(p, j);
          if (!rows) continue;
          Tensor exact = exact_l1_columns(*rows);
          auto est = estimates.find(p.origin);
          for (std::size_t t = 0; t < nj; ++t) {
            d.audit_.push_back({i, p.origin, est == estimates.end() ? 0.0 : est->second[t], exact[t]});
          }
        }
      }
      Tensor c = ops::reshape(center[static_cast<std::size_t>(j)], {nj});
      PreactBounds b;
      if (radius.empty()) {
        b = {c, c};
      } else {
        Tensor r = ops::add_n(radius);
        b = {ops::sub(c, r), ops::add(c, r)};
      }
      d.bounds_[i] = b;
      layer = make_dual_layer(net, i, &d.bounds_[i]);
    } else {
      layer = make_dual_layer(net, i, nullptr);
    }

    std::vector<Tensor> in_centers;
    for (int j : spec.inputs) in_centers.push_back(center[static_cast<std::size_t>(j)]);
    center[static_cast<std::size_t>(i)] = layer->propagate_affine(in_centers);

    if (i <= limit) {
      for (auto& p : pipes) {
        std::vector<Tensor> present;
        bool lazy_linear = false;
        for (int j : spec.inputs) {
          if (j == 1 && p.lazy_identity && std::holds_alternative<Linear>(spec.kind)) {
            lazy_linear = true;
            continue;
          }
          if (auto r = materialize(p, j)) present.push_back(*r);
        }
        if (lazy_linear) {
          p.rows[i] = ops::transpose(std::get<Linear>(spec.kind).weight);
        } else if (present.size() == spec.inputs.size()) {
          p.rows[i] = layer->propagate(present);
        } else if (!present.empty()) {
          p.rows[i] = ops::add_n(present);  // Add layer with producers this pipe never reached
        }
      }
    }

    const bool new_source = i < limit || (cfg.pipe_to_output && i <= limit);
    if (new_source && is_activation(spec.kind)) {
      const auto& act = static_cast<const ActivationDual&>(*layer);
      const auto& active = act.active_units();
      if (!active.empty()) {
        const std::size_t ni = net.size_of(i);
        auto exact_seed = [&](bool shadow) {
          Pipe p;
          p.origin = i;
          p.shadow = shadow;
          p.rows[i] = ops::scatter_diag(act.weight(), active);
          pipes.push_back(std::move(p));
        };
        if (cfg.mode == BoundMode::exact) {
          exact_seed(false);
        } else {
          const std::size_t cols = cfg.mode == BoundMode::median ? cfg.r : cols_hp;
          Pipe p;
          p.origin = i;
          p.rows[i] = ops::affine_diag(sample_cauchy(cols, ni, derive_seed(cfg.seed, static_cast<std::uint64_t>(i))),
                                       act.weight(), Tensor());
          pipes.push_back(std::move(p));
          if (audit) exact_seed(true);
        }
      }
    }

    d.layers_.push_back(std::move(layer));
    // Release rows no later layer reads.
    for (auto& p : pipes) {
      for (auto it = p.rows.begin(); it != p.rows.end();) {
        if (last_use[static_cast<std::size_t>(it->first)] <= i) {
          it = p.rows.erase(it);
        } else {
          ++it;
        }
      }
    }
  }

  d.center_k_ = center[static_cast<std::size_t>(k)];
  if (cfg.pipe_to_output) {
    for (auto& p : pipes) {
      if (p.shadow) continue;
      if (auto r = rows_at(p, k)) d.pipes_.push_back({p.origin, *r});
    }
  }
  return d;
}

DualVariables dual_backward(const DualNetwork& dual, const Tensor& C) {
  const NetworkGraph& net = dual.net();
  const int k = net.output_id();
  if (C.rank() != 2 || C.dim(1) != net.output_dim()) {
    throw ShapeError("objective rows must have " + std::to_string(net.output_dim()) + " columns, got " +
                     to_string(C.shape()));
  }
  DualVariables v;
  v.nu[k] = ops::neg(C);
  for (int i = k; i >= 2; --i) {
    auto it = v.nu.find(i);
    if (it == v.nu.end()) continue;
    const DualLayer& layer = dual.layer(i);
    v.h[i] = layer.objective(it->second);
    std::vector<Tensor> contrib = layer.backward(it->second);
    for (std::size_t t = 0; t < contrib.size(); ++t) {
      const int j = layer.inputs()[t];
      auto slot = v.nu.find(j);
      if (slot == v.nu.end()) {
        v.nu[j] = contrib[t];
      } else {
        slot->second = ops::add(slot->second, contrib[t]);
      }
    }
  }
  if (!v.nu.count(1)) v.nu[1] = Tensor::zeros({C.dim(0), net.input_size()});
  return v;
}

Tensor objective_backward(const DualNetwork& dual, const Tensor& C) {
  DualVariables v = dual_backward(dual, C);
  const Tensor& nu1 = v.nu.at(1);
  const std::size_t rows = C.dim(0);
  Tensor x_term = ops::reshape(ops::matmul(nu1, ops::reshape(dual.anchor(), {1, dual.anchor().size()}), true), {rows});
  Tensor norm = dual.ball().norm == BallNorm::linf ? ops::sum_axis(ops::abs(nu1), 1) : ops::norm2_axis(nu1, 1);
  std::vector<Tensor> terms{ops::neg(x_term), ops::scale(norm, -dual.ball().eps)};
  for (const auto& [id, h] : v.h) terms.push_back(ops::neg(h));
  return ops::add_n(terms);
}

Tensor objective_forward(const DualNetwork& dual, const Tensor& C) {
  if (!dual.config().pipe_to_output) throw std::logic_error("objective_forward needs a build with pipe_to_output");
  const NetworkGraph& net = dual.net();
  if (C.rank() != 2 || C.dim(1) != net.output_dim()) {
    throw ShapeError("objective rows must have " + std::to_string(net.output_dim()) + " columns, got " +
                     to_string(C.shape()));
  }
  const std::size_t rows = C.dim(0);
  std::vector<Tensor> terms{ops::reshape(ops::matmul(C, dual.output_center(), true), {rows})};
  for (const auto& pipe : dual.output_pipes()) {
    Tensor projected = ops::matmul(pipe.rows, C, true);
    Tensor norm = column_norm(projected, pipe.source == 1, dual.ball().norm, dual.config());
    terms.push_back(ops::scale(norm, pipe.source == 1 ? -dual.ball().eps : -1.0));
  }
  return ops::add_n(terms);
}

std::size_t high_prob_estimate_count(const NetworkGraph& net) {
  std::size_t n = 0;
  for (const auto& spec : net.layers()) {
    if (!is_activation(spec.kind)) continue;
    const int j = spec.inputs.front();
    std::size_t upstream = 0;
    for (const auto& other : net.layers())
      if (other.id < j && is_activation(other.kind)) ++upstream;
    n += net.size_of(j) * (1 + upstream);
  }
  return n;
}

}  // namespace dualnet
