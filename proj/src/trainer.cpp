#include "dualnet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>
#include <variant>
#include <random>
#include <stdexcept>

#include "dualnet/autodiff.hpp"
#include "dualnet/ops.hpp"
#include "dualnet/parallel.hpp"

namespace dualnet {

OptimizerConfig OptimizerConfig::adam(double lr) {
  OptimizerConfig o;
  o.kind = Kind::adam;
  o.lr = lr;
  return o;
}

OptimizerConfig OptimizerConfig::sgd(double lr, double momentum) {
  OptimizerConfig o;
  o.kind = Kind::sgd;
  o.lr = lr;
  o.momentum = momentum;
  return o;
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
  if (!(eps_start >= 0.0) || !(eps_end >= 0.0)) throw std::invalid_argument("epsilon must be nonnegative");
  if (eps_start > eps_end) throw std::invalid_argument("eps_start must not exceed eps_end");
  if (!(optimizer.lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (!estimator.exact && estimator.r < 1) throw std::invalid_argument("projection count must be at least 1");
  if (lr_decay_period < 1) throw std::invalid_argument("lr_decay_period must be at least 1");
}

double epsilon_at(const TrainConfig& cfg, std::size_t epoch) {
  if (cfg.eps_warmup_epochs == 0) return cfg.eps_end;
  const double t = std::min(1.0, static_cast<double>(epoch) / static_cast<double>(cfg.eps_warmup_epochs));
  return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * t;
}

double learning_rate_at(const TrainConfig& cfg, std::size_t epoch) {
  if (epoch < cfg.eps_warmup_epochs) return cfg.optimizer.lr;
  const std::size_t decays = (epoch - cfg.eps_warmup_epochs) / cfg.lr_decay_period;
  return cfg.optimizer.lr * std::pow(cfg.lr_decay_factor, static_cast<double>(decays));
}

Tensor surrogate_logits(const NetworkGraph& net, const Tensor& x, int y, const Ball& ball,
                        const BoundEstimator& estimator, std::uint64_t seed) {
  Tensor C = all_target_rows(y, net.output_dim());
  Tensor J;
  if (estimator.exact) {
    J = objective_backward(build_dual(net, x, ball), C);
  } else {
    J = objective_backward(build_dual(net, x, ball, EstimatorConfig::median(estimator.r, seed)), C);
  }
  return ops::neg(J);
}

LossResult robust_loss(const NetworkGraph& net, const Dataset& batch, const Ball& ball,
                       const BoundEstimator& estimator, std::uint64_t seed, std::size_t threads) {
  const std::size_t n = batch.size();
  if (n == 0) throw std::invalid_argument("robust_loss: empty batch");
  for (int y : batch.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= net.output_dim()) throw std::invalid_argument("robust_loss: label out of range");
  }
  std::vector<Tensor> leaves;
  for (const auto& p : net.parameters()) leaves.push_back(p.requires_grad() ? p : p.as_parameter());
  const NetworkGraph model = net.with_parameters(leaves);

  std::vector<double> losses(n);
  std::vector<std::vector<std::vector<double>>> grads(n);
  parallel_for(n, threads, [&](std::size_t i) {
    Tape tape;
    Tensor loss;
    try {
      auto rec = tape.record();
      Tensor logits = surrogate_logits(model, batch.example(i), batch.labels[i], ball, estimator, derive_seed(seed, i));
      loss = ops::cross_entropy(ops::reshape(logits, {1, logits.size()}), {batch.labels[i]});
    } catch (const NumericError& e) {
      throw NumericError("non-finite loss at example " + std::to_string(i) + ": " + e.what());
    }
    losses[i] = loss.item();
    auto g = tape.empty() ? GradientMap{} : backward(tape, loss);
    grads[i].resize(leaves.size());
    for (std::size_t p = 0; p < leaves.size(); ++p) {
      auto it = g.find(leaves[p].id());
      grads[i][p] = it == g.end() ? std::vector<double>(leaves[p].size(), 0.0) : it->second.values();
    }
  });

  LossResult out;
  for (double l : losses) out.loss += l;
  out.loss /= static_cast<double>(n);
  for (std::size_t p = 0; p < leaves.size(); ++p) {
    std::vector<double> acc(leaves[p].size(), 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < acc.size(); ++t) acc[t] += grads[i][p][t];
    for (auto& v : acc) v /= static_cast<double>(n);
    out.gradients.emplace_back(leaves[p].shape(), std::move(acc));
  }
  if (!std::isfinite(out.loss)) throw NumericError("non-finite batch loss");
  return out;
}

NetworkGraph refresh_batchnorm(const NetworkGraph& net, const Tensor& xs) {
  bool any = false;
  for (const auto& spec : net.layers()) any = any || std::holds_alternative<BatchNormFixed>(spec.kind);
  if (!any) return net;
  std::vector<LayerSpec> layers = net.layers();
  // Statistics of a layer follow from the already-refreshed layers before it,
  // so refresh one BN layer at a time.
  for (auto& spec : layers) {
    auto* bn = std::get_if<BatchNormFixed>(&spec.kind);
    if (!bn) continue;
    NetworkGraph current(net.input_shape(), layers);
    const int producer = spec.inputs.front();
    Tensor z;
    current.forward_batch(xs.detach(), [&](int id, const Tensor& v) {
      if (id == producer) z = v;
    });
    const Shape& s = net.shape_of(producer);
    const std::size_t c = bn->gamma.size(), spatial = numel(s) / c, n = z.dim(0);
    std::vector<double> mean(c, 0.0), var(c, 0.0);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t q = 0; q < spatial; ++q) mean[k] += z[r * numel(s) + k * spatial + q];
    const double count = static_cast<double>(n * spatial);
    for (auto& m : mean) m /= count;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t q = 0; q < spatial; ++q) {
          double dlt = z[r * numel(s) + k * spatial + q] - mean[k];
          var[k] += dlt * dlt;
        }
    for (auto& v : var) v /= count;
    bn->mean = Tensor::vector(mean);
    bn->var = Tensor::vector(var);
  }
  return NetworkGraph(net.input_shape(), std::move(layers));
}

namespace {

class Optimizer {
 public:
  Optimizer(const OptimizerConfig& cfg, const std::vector<Tensor>& params) : cfg_(cfg) {
    for (const auto& p : params) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  std::vector<Tensor> step(const std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr) {
    ++t_;
    std::vector<Tensor> out;
    for (std::size_t p = 0; p < params.size(); ++p) {
      std::vector<double> w = params[p].values();
      auto& m = m_[p];
      auto& v = v_[p];
      if (cfg_.kind == OptimizerConfig::Kind::adam) {
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < w.size(); ++i) {
          const double g = grads[p][i];
          m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
          v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
          w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.adam_eps);
        }
      } else {
        for (std::size_t i = 0; i < w.size(); ++i) {
          m[i] = cfg_.momentum * m[i] + grads[p][i];
          w[i] -= lr * m[i];
        }
      }
      out.emplace_back(params[p].shape(), std::move(w), true);
    }
    return out;
  }

 private:
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

NetworkGraph detached(const NetworkGraph& net) {
  std::vector<Tensor> params;
  for (const auto& p : net.parameters()) params.push_back(p.detach());
  return net.with_parameters(params);
}

std::pair<double, double> evaluate(const NetworkGraph& net, const Dataset& data, double eps, BallNorm norm,
                                   std::size_t limit, std::size_t threads) {
  const Dataset d = limit > 0 && limit < data.size() ? data.head(limit) : data;
  if (d.size() == 0) return {0.0, 0.0};
  RobustErrorResult r = robust_error(net, d.features, d.labels, Ball{norm, eps}, CertifyOptions{}, threads);
  return {r.robust_error, r.standard_error};
}

}  // namespace

TrainResult train(const NetworkGraph& net, const Dataset& train_set, const Dataset* test_set, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  if (train_set.size() == 0) throw std::invalid_argument("train: empty training set");
  std::vector<Tensor> params;
  for (const auto& p : net.parameters()) params.push_back(p.as_parameter());
  NetworkGraph current = net.with_parameters(params);
  Optimizer opt(cfg.optimizer, params);
  TrainResult result{detached(current), {}, std::nullopt};
  NetworkGraph last_good = current;
  auto diverge = [&](std::size_t epoch, const std::exception& e) {
    result.net = detached(last_good);
    result.diverged = "epoch " + std::to_string(epoch) + ": " + e.what();
    return result;
  };

  const std::size_t n = train_set.size();
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double eps = epsilon_at(cfg, epoch);
    const double lr = learning_rate_at(cfg, epoch);
    current = refresh_batchnorm(current, train_set.features);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 rng(derive_seed(cfg.seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                   order.begin() + static_cast<long>(std::min(n, start + cfg.batch_size)));
      const std::uint64_t batch_seed = derive_seed(derive_seed(cfg.seed, epoch + 1), start);
      LossResult lr_result;
      try {
        lr_result = robust_loss(current, train_set.subset(idx), Ball{cfg.norm, eps}, cfg.estimator, batch_seed,
                                cfg.threads);
      } catch (const NumericError& e) {
        return diverge(epoch, e);
      }
      last_good = current;
      try {
        params = opt.step(current.parameters(), lr_result.gradients, lr);
        current = current.with_parameters(params);
      } catch (const NumericError& e) {
        return diverge(epoch, e);
      }
      loss_sum += lr_result.loss;
      ++batches;
    }
    result.net = detached(current);

    EpochMetrics m;
    m.epoch = epoch;
    m.eps = eps;
    m.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1));
    if (cfg.evaluate) {
      std::tie(m.train_robust_error, m.train_standard_error) =
          evaluate(result.net, train_set, eps, cfg.norm, cfg.eval_limit, cfg.threads);
      if (test_set) {
        std::tie(m.test_robust_error, m.test_standard_error) =
            evaluate(result.net, *test_set, eps, cfg.norm, cfg.eval_limit, cfg.threads);
      }
    }
    result.metrics.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return result;
}

Cascade cascade_train(const std::vector<NetworkGraph>& stage_nets, const Dataset& train_set, const TrainConfig& cfg,
                      const EpochCallback& on_epoch) {
  if (stage_nets.empty()) throw std::invalid_argument("cascade needs at least one stage");
  Cascade cascade;
  std::vector<std::size_t> working(train_set.size());
  for (std::size_t i = 0; i < working.size(); ++i) working[i] = i;
  const Ball ball{cfg.norm, cfg.eps_end};
  for (const auto& init : stage_nets) {
    if (working.empty()) break;
    Dataset subset = train_set.subset(working);
    TrainResult r = train(init, subset, nullptr, cfg, on_epoch);
    if (r.diverged) throw NumericError("cascade stage " + std::to_string(cascade.stages.size()) + " diverged: " + *r.diverged);
    RobustErrorResult certs = robust_error(r.net, subset.features, subset.labels, ball, CertifyOptions{}, cfg.threads);
    std::vector<std::size_t> remaining;
    std::size_t certified = 0;
    for (std::size_t i = 0; i < working.size(); ++i) {
      if (certs.certificates[i].certified) {
        ++certified;
      } else {
        remaining.push_back(working[i]);
      }
    }
    cascade.stages.push_back(r.net);
    cascade.eps.push_back(cfg.eps_end);
    cascade.trained_on.push_back(working.size());
    cascade.certified.push_back(certified);
    working = std::move(remaining);
  }
  return cascade;
}

CascadeAnswer cascade_predict(const Cascade& cascade, const Tensor& x, const Ball& ball, const CertifyOptions& options) {
  if (cascade.stages.empty()) throw std::invalid_argument("empty cascade");
  CascadeAnswer answer;
  answer.fallback = cascade.stages.back().predict(x);
  for (std::size_t s = 0; s < cascade.stages.size(); ++s) {
    Certificate c = certify(cascade.stages[s], x, ball, options);
    if (c.certified) {
      answer.label = c.predicted;
      answer.stage = static_cast<int>(s);
      return answer;
    }
  }
  return answer;
}

CascadeError cascade_error(const Cascade& cascade, const Dataset& data, const Ball& ball, const CertifyOptions& options,
                           std::size_t threads) {
  if (data.size() == 0) throw std::invalid_argument("cascade_error: empty dataset");
  std::vector<CascadeAnswer> answers(data.size());
  parallel_for(data.size(), threads,
               [&](std::size_t i) { answers[i] = cascade_predict(cascade, data.example(i), ball, options); });
  CascadeError e;
  e.n = data.size();
  std::size_t robust = 0, standard = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& a = answers[i];
    const int label = a.label == NO_CERTIFICATE ? a.fallback : a.label;
    standard += label != data.labels[i];
    robust += a.label == NO_CERTIFICATE || a.label != data.labels[i];
  }
  e.robust_error = static_cast<double>(robust) / static_cast<double>(e.n);
  e.standard_error = static_cast<double>(standard) / static_cast<double>(e.n);
  return e;
}

}  // namespace dualnet
