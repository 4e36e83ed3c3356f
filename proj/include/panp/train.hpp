#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "panp/model.hpp"
#include "panp/rng.hpp"
#include "panp/taskgen.hpp"
#include "panp/tensor.hpp"

namespace panp {

/// Thrown when training hits a non-finite loss; the CLI maps it to its own
/// exit code, distinct from usage and I/O failures.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  size_t steps = 2000;
  size_t batch_size = 8;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  uint64_t seed = 0;
  size_t log_interval = 10;
  double kl_weight = 1.0;
};

/// -sum log N(y | mu, sigma^2), elementwise over equal shapes.
Tensor gaussian_nll(const Tensor& y, const Tensor& mu, const Tensor& sigma);

/// KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)) summed over dimensions.
Tensor kl_diag_gaussians(const Tensor& mu_q, const Tensor& sigma_q, const Tensor& mu_p,
                         const Tensor& sigma_p);

struct ElboParts {
  Tensor loss;  // (nll + kl_weight * kl) / n_target_outputs
  Tensor nll;   // nll / n_target_outputs
  Tensor kl;    // kl / n_target_outputs
};

/// Per-output-scalar normalized ELBO loss for a train-mode forward result.
ElboParts elbo_loss(const ForwardResult& res, const TaskBatch& task, double kl_weight);

struct AdamState {
  std::vector<std::vector<double>> m, v;
  uint64_t t = 0;
};

AdamState make_adam_state(const NamedParams& params);

/// Standard bias-corrected Adam over the parameter list; missing gradients
/// count as zero. Does not clear gradients.
void adam_step(const NamedParams& params, AdamState& st, const TrainConfig& cfg);

struct MetricsRow {
  size_t step = 0;
  double loss = 0.0;
  double nll = 0.0;
  double kl = 0.0;
};

struct Checkpoint {
  ModelConfig model;
  NamedParams params;  // value-only tensors
  std::vector<std::vector<double>> adam_m, adam_v;
  uint64_t adam_t = 0;
  uint64_t seed = 0;
  uint64_t next_episode = 0;
  Rng::State rng_state;
  uint64_t step = 0;
};

/// Rebuilds live model parameters from the checkpoint's value table.
ModelParams params_from_checkpoint(const Checkpoint& ckpt);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<MetricsRow> logged;
  std::vector<double> loss_history;  // one entry per step
  std::vector<double> nll_history;
  std::vector<double> kl_history;
};

using TaskSource = std::function<TaskBatch(Rng&)>;
using MetricsSink = std::function<void(const MetricsRow&)>;

/// Seeded end-to-end training: init params from Rng(seed), then per step
/// draw batch_size episodes (episode e uses Rng(seed + 1 + e)), average the
/// ELBO loss, backprop, Adam-update. Aborts with NumericError on a
/// non-finite loss.
TrainResult train(const ModelConfig& mcfg, const TrainConfig& tcfg, const TaskSource& source,
                  const MetricsSink& on_row = nullptr);

struct EvalConfig {
  size_t n_tasks = 100;
  std::vector<double> fractions = {0.1, 0.5, 1.0};
  uint64_t seed = 0;
  KernelConfig kernel;
  size_t side = 16;    // image tasks
  size_t n_tgt = 50;   // point tasks
  double x_lo = -2.0;
  double x_hi = 2.0;
};

struct EvalRow {
  double fraction = 0.0;
  double nll = 0.0;      // mean target NLL per output scalar
  double mse = 0.0;      // mean squared error over all target outputs
  double ctx_mse = 0.0;  // restricted to context elements
  double mid_mse = 0.0;  // mean (y - 0.5)^2, for constant-predictor reference NLLs
};

struct EvalReport {
  std::vector<EvalRow> rows;
};

/// Seeded evaluation over fresh tasks; context fractions share nested
/// context subsets per task so rows are paired. Point variants read the
/// fraction as a share of n_tgt.
EvalReport evaluate(const ModelParams& params, const EvalConfig& cfg);

struct PointEvalStats {
  double nll = 0.0;
  double mse = 0.0;
};

/// Mean held-out NLL/MSE for point models with a uniform-random context
/// count per task, the protocol used to compare variants on 1-D tasks.
PointEvalStats evaluate_points_range(const ModelParams& params, size_t n_tasks, size_t n_tgt,
                                     size_t n_ctx_lo, size_t n_ctx_hi, double x_lo, double x_hi,
                                     const KernelConfig& kernel, uint64_t seed);

/// NLL per output scalar of always predicting N(mu0, sigma0^2), given the
/// mean squared deviation of the data from mu0.
double constant_predictor_nll(double deviation_mse, double sigma0);

}  // namespace panp
