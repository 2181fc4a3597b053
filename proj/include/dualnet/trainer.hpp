#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dualnet/autodual.hpp"
#include "dualnet/certifier.hpp"
#include "dualnet/dataset.hpp"
#include "dualnet/network.hpp"

namespace dualnet {

struct OptimizerConfig {
  enum class Kind { sgd, adam };
  Kind kind = Kind::adam;
  double lr = 1e-3;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  static OptimizerConfig adam(double lr = 1e-3);
  static OptimizerConfig sgd(double lr = 0.05, double momentum = 0.9);
};

/// Exact bounds or median-of-Cauchy estimates with r projections.
struct BoundEstimator {
  bool exact = true;
  std::size_t r = 10;

  static BoundEstimator exact_bounds() { return {}; }
  static BoundEstimator projected(std::size_t r) { return {false, r}; }
};

struct TrainConfig {
  OptimizerConfig optimizer;
  std::size_t batch_size = 50;
  std::size_t epochs = 10;
  double eps_start = 0.01;
  double eps_end = 0.1;
  std::size_t eps_warmup_epochs = 0;
  double lr_decay_factor = 0.5;
  std::size_t lr_decay_period = 10;
  BallNorm norm = BallNorm::linf;
  BoundEstimator estimator;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  /// Per-epoch robust/standard error evaluation (exact certificates); a
  /// limit of 0 evaluates every example.
  bool evaluate = true;
  std::size_t eval_limit = 0;

  void validate() const;
};

/// eps used during a 0-based epoch: linear from eps_start to eps_end over
/// the warmup epochs, constant afterwards.
double epsilon_at(const TrainConfig& cfg, std::size_t epoch);
/// Learning rate during a 0-based epoch.
double learning_rate_at(const TrainConfig& cfg, std::size_t epoch);

struct LossResult {
  double loss = 0.0;
  /// Mean gradient, aligned with net.parameters().
  std::vector<Tensor> gradients;
};

/// Surrogate logits for one example: 0 at y and -J_j elsewhere.
Tensor surrogate_logits(const NetworkGraph& net, const Tensor& x, int y, const Ball& ball,
                        const BoundEstimator& estimator, std::uint64_t seed);

/// Mean cross-entropy of the surrogate logits over a batch and its gradient
/// in the network parameters.  Example i uses projection seed
/// derive_seed(seed, i).  The gradient is summed in example order, so it
/// does not depend on `threads`.
LossResult robust_loss(const NetworkGraph& net, const Dataset& batch, const Ball& ball,
                       const BoundEstimator& estimator, std::uint64_t seed = 0, std::size_t threads = 1);

struct EpochMetrics {
  std::size_t epoch = 0;
  double eps = 0.0;
  double train_loss = 0.0;
  double train_robust_error = 0.0;
  double test_robust_error = 0.0;
  double train_standard_error = 0.0;
  double test_standard_error = 0.0;
};

struct TrainResult {
  NetworkGraph net;
  std::vector<EpochMetrics> metrics;
  /// Set when a non-finite loss stopped training; `net` is then the last
  /// parameters that produced a finite loss.
  std::optional<std::string> diverged;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Recomputes the statistics of every BatchNormFixed layer from the
/// training inputs and freezes them.
NetworkGraph refresh_batchnorm(const NetworkGraph& net, const Tensor& xs);

TrainResult train(const NetworkGraph& net, const Dataset& train_set, const Dataset* test_set,
                  const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Networks queried in order; each answers only for inputs it certifies.
struct Cascade {
  std::vector<NetworkGraph> stages;
  std::vector<double> eps;
  /// Size of the working set each stage trained on and how many of those it
  /// certified.
  std::vector<std::size_t> trained_on;
  std::vector<std::size_t> certified;
};

constexpr int NO_CERTIFICATE = -1;

/// Trains stage i on the examples stages 1..i-1 did not certify (exact
/// certificates at cfg.eps_end), stopping early when none remain.
Cascade cascade_train(const std::vector<NetworkGraph>& stage_nets, const Dataset& train_set, const TrainConfig& cfg,
                      const EpochCallback& on_epoch = {});

struct CascadeAnswer {
  int label = NO_CERTIFICATE;  // certified label or NO_CERTIFICATE
  int stage = -1;              // 0-based answering stage
  int fallback = 0;            // last stage's plain prediction
};

CascadeAnswer cascade_predict(const Cascade& cascade, const Tensor& x, const Ball& ball,
                              const CertifyOptions& options = {});

struct CascadeError {
  double robust_error = 0.0;
  double standard_error = 0.0;
  std::size_t n = 0;
};

/// Robust error counts NO_CERTIFICATE and wrong certified labels; standard
/// error uses the certified label when there is one and the last stage's
/// prediction otherwise.
CascadeError cascade_error(const Cascade& cascade, const Dataset& data, const Ball& ball,
                           const CertifyOptions& options = {}, std::size_t threads = 1);

}  // namespace dualnet
