#include "panp/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "panp/rng.hpp"

namespace panp {

namespace {

constexpr double kHalfLog2Pi = 0.9189385332046727;  // 0.5 * log(2 pi)

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
  }
}

void require_positive(const Tensor& sigma, const char* what) {
  for (double s : sigma.data()) {
    if (!(s > 0.0)) {
      throw std::invalid_argument(std::string(what) + ": sigma must be positive");
    }
  }
}

}  // namespace

Tensor gaussian_nll(const Tensor& y, const Tensor& mu, const Tensor& sigma) {
  if (!y.defined() || !mu.defined() || !sigma.defined()) {
    throw std::invalid_argument("gaussian_nll: undefined tensor");
  }
  require_same_shape(y, mu, "gaussian_nll");
  require_same_shape(y, sigma, "gaussian_nll");
  require_positive(sigma, "gaussian_nll");
  Tensor z = div(sub(y, mu), sigma);
  Tensor quad = mul_scalar(mul(z, z), 0.5);
  Tensor per_el = add(add_scalar(log(sigma), kHalfLog2Pi), quad);
  return sum(per_el);
}

Tensor kl_diag_gaussians(const Tensor& mu_q, const Tensor& sigma_q, const Tensor& mu_p,
                         const Tensor& sigma_p) {
  if (!mu_q.defined() || !sigma_q.defined() || !mu_p.defined() || !sigma_p.defined()) {
    throw std::invalid_argument("kl_diag_gaussians: undefined tensor");
  }
  require_same_shape(mu_q, sigma_q, "kl_diag_gaussians");
  require_same_shape(mu_q, mu_p, "kl_diag_gaussians");
  require_same_shape(mu_q, sigma_p, "kl_diag_gaussians");
  require_positive(sigma_q, "kl_diag_gaussians");
  require_positive(sigma_p, "kl_diag_gaussians");
  Tensor log_ratio = sub(log(sigma_p), log(sigma_q));
  Tensor d = sub(mu_q, mu_p);
  Tensor num = add(mul(sigma_q, sigma_q), mul(d, d));
  Tensor den = mul_scalar(mul(sigma_p, sigma_p), 2.0);
  Tensor per_dim = add_scalar(add(log_ratio, div(num, den)), -0.5);
  return sum(per_dim);
}

ElboParts elbo_loss(const ForwardResult& res, const TaskBatch& task, double kl_weight) {
  const Tensor& y = task.kind == TaskBatch::Kind::Patches ? task.tgt_patches : task.tgt_y;
  if (!y.defined() || y.numel() == 0) {
    throw std::invalid_argument("elbo_loss: task has no targets");
  }
  Tensor nll_total = gaussian_nll(y, res.pred.mu, res.pred.sigma);

  Tensor kl_total;
  if (res.lat_ctx.mu_z.defined()) {
    if (!res.lat_tgt.mu_z.defined()) {
      throw std::invalid_argument("elbo_loss: missing posterior stats; forward must run in train mode");
    }
    kl_total = kl_diag_gaussians(res.lat_tgt.mu_z, res.lat_tgt.sigma_z, res.lat_ctx.mu_z,
                                 res.lat_ctx.sigma_z);
  } else {
    kl_total = Tensor::scalar(0.0);
  }

  double inv = 1.0 / static_cast<double>(y.numel());
  ElboParts out;
  out.loss = mul_scalar(add(nll_total, mul_scalar(kl_total, kl_weight)), inv);
  out.nll = mul_scalar(nll_total, inv);
  out.kl = mul_scalar(kl_total, inv);
  return out;
}

AdamState make_adam_state(const NamedParams& params) {
  AdamState st;
  st.m.reserve(params.size());
  st.v.reserve(params.size());
  for (const auto& [name, t] : params) {
    st.m.emplace_back(t.numel(), 0.0);
    st.v.emplace_back(t.numel(), 0.0);
  }
  return st;
}

void adam_step(const NamedParams& params, AdamState& st, const TrainConfig& cfg) {
  if (st.m.size() != params.size() || st.v.size() != params.size()) {
    throw std::invalid_argument("adam_step: state does not match parameter list");
  }
  st.t += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].second;
    std::vector<double>& w = t.data();
    std::vector<double>& m = st.m[i];
    std::vector<double>& v = st.v[i];
    if (m.size() != w.size()) {
      throw std::invalid_argument("adam_step: moment size mismatch for " + params[i].first);
    }
    const std::vector<double>* g = t.has_grad() ? &t.grad() : nullptr;
    for (size_t j = 0; j < w.size(); ++j) {
      double gj = g ? (*g)[j] : 0.0;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      double mhat = m[j] / bc1;
      double vhat = v[j] / bc2;
      w[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

namespace {

void validate_train_config(const TrainConfig& cfg) {
  if (cfg.steps < 1) throw std::invalid_argument("train: steps must be >= 1");
  if (cfg.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("train: lr must be positive");
  if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0)) {
    throw std::invalid_argument("train: betas must lie in [0, 1)");
  }
  if (!(cfg.eps > 0.0)) throw std::invalid_argument("train: eps must be positive");
  if (cfg.log_interval < 1) throw std::invalid_argument("train: log_interval must be >= 1");
  if (!(cfg.kl_weight >= 0.0)) throw std::invalid_argument("train: kl_weight must be >= 0");
}

}  // namespace

TrainResult train(const ModelConfig& mcfg, const TrainConfig& tcfg, const TaskSource& source,
                  const MetricsSink& on_row) {
  validate_train_config(tcfg);
  if (!source) throw std::invalid_argument("train: task source is empty");

  Rng master(tcfg.seed);
  ModelParams params = make_model(mcfg, master);
  NamedParams named = params.named_params();
  AdamState adam = make_adam_state(named);

  TrainResult out;
  out.loss_history.reserve(tcfg.steps);
  uint64_t episode = 0;

  for (size_t step = 1; step <= tcfg.steps; ++step) {
    Tensor total;
    double nll_sum = 0.0;
    double kl_sum = 0.0;
    for (size_t b = 0; b < tcfg.batch_size; ++b) {
      Rng ep(tcfg.seed + 1 + episode);
      ++episode;
      TaskBatch task = source(ep);
      ForwardResult res = forward(params, task, ep, Mode::Train);
      ElboParts parts = elbo_loss(res, task, tcfg.kl_weight);
      total = b == 0 ? parts.loss : add(total, parts.loss);
      nll_sum += parts.nll.value();
      kl_sum += parts.kl.value();
    }
    Tensor loss = mul_scalar(total, 1.0 / static_cast<double>(tcfg.batch_size));
    double loss_v = loss.value();
    if (!std::isfinite(loss_v)) {
      throw NumericError("train: non-finite loss at step " + std::to_string(step));
    }
    backward(loss);
    adam_step(named, adam, tcfg);
    for (auto& [name, t] : named) t.zero_grad();

    double nll_v = nll_sum / static_cast<double>(tcfg.batch_size);
    double kl_v = kl_sum / static_cast<double>(tcfg.batch_size);
    out.loss_history.push_back(loss_v);
    out.nll_history.push_back(nll_v);
    out.kl_history.push_back(kl_v);

    if ((step - 1) % tcfg.log_interval == 0 || step == tcfg.steps) {
      MetricsRow row{step, loss_v, nll_v, kl_v};
      out.logged.push_back(row);
      if (on_row) on_row(row);
    }
  }

  Checkpoint& ckpt = out.checkpoint;
  ckpt.model = mcfg;
  for (const auto& [name, t] : named) ckpt.params.emplace_back(name, t.detach_copy());
  ckpt.adam_m = adam.m;
  ckpt.adam_v = adam.v;
  ckpt.adam_t = adam.t;
  ckpt.seed = tcfg.seed;
  ckpt.next_episode = episode;
  ckpt.rng_state = master.state();
  ckpt.step = tcfg.steps;
  return out;
}

ModelParams params_from_checkpoint(const Checkpoint& ckpt) {
  Rng scratch(0);
  ModelParams params = make_model(ckpt.model, scratch);
  NamedParams live = params.named_params();
  if (live.size() != ckpt.params.size()) {
    throw std::invalid_argument("checkpoint parameter table does not match the model layout");
  }
  for (size_t i = 0; i < live.size(); ++i) {
    const auto& [saved_name, saved] = ckpt.params[i];
    auto& [name, t] = live[i];
    if (saved_name != name) {
      throw std::invalid_argument("checkpoint parameter order mismatch: expected " + name +
                                  ", found " + saved_name);
    }
    if (saved.shape() != t.shape()) {
      throw std::invalid_argument("checkpoint shape mismatch for " + name);
    }
    t.data() = saved.data();
  }
  return params;
}

namespace {

struct Accum {
  double nll = 0.0;
  double mse = 0.0;
  double ctx_mse = 0.0;
  double mid_mse = 0.0;
};

// Closed-form per-scalar metrics over a prediction; context positions are
// accumulated in target order so a full-context split matches mse exactly.
Accum task_metrics(const PredictiveDistribution& pred, const Tensor& y,
                   const std::vector<size_t>& ctx_indices, double mid) {
  size_t n = y.rows();
  size_t d = y.cols();
  std::vector<char> is_ctx(n, 0);
  for (size_t i : ctx_indices) is_ctx[i] = 1;

  Accum a;
  double ctx_count = 0.0;
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < d; ++j) {
      double yy = y.at(i, j);
      double mu = pred.mu.at(i, j);
      double sg = pred.sigma.at(i, j);
      double diff = yy - mu;
      double se = diff * diff;
      a.nll += kHalfLog2Pi + std::log(sg) + se / (2.0 * sg * sg);
      a.mse += se;
      a.mid_mse += (yy - mid) * (yy - mid);
      if (is_ctx[i]) {
        a.ctx_mse += se;
        ctx_count += 1.0;
      }
    }
  }
  double total = static_cast<double>(n * d);
  a.nll /= total;
  a.mse /= total;
  a.mid_mse /= total;
  a.ctx_mse = ctx_count > 0.0 ? a.ctx_mse / ctx_count : 0.0;
  return a;
}

size_t context_count(double fraction, size_t n) {
  auto c = static_cast<size_t>(std::ceil(fraction * static_cast<double>(n)));
  return std::min(std::max<size_t>(c, 1), n);
}

}  // namespace

EvalReport evaluate(const ModelParams& params, const EvalConfig& cfg) {
  if (cfg.n_tasks < 1) throw std::invalid_argument("evaluate: n_tasks must be >= 1");
  if (cfg.fractions.empty()) throw std::invalid_argument("evaluate: no context fractions");
  for (double f : cfg.fractions) {
    if (!(f > 0.0 && f <= 1.0)) {
      throw std::invalid_argument("evaluate: context fractions must lie in (0, 1]");
    }
  }
  const ModelConfig& m = params.cfg;

  std::vector<Accum> sums(cfg.fractions.size());

  if (m.uses_patches()) {
    if (cfg.side == 0 || cfg.side % m.patch_size != 0) {
      throw std::invalid_argument("evaluate: patch size must divide the image side");
    }
    ImageGpSampler sampler(cfg.side, cfg.kernel);
    for (size_t i = 0; i < cfg.n_tasks; ++i) {
      Rng trng(cfg.seed + 1 + i);
      Tensor img = sampler.sample(trng);
      auto [rows, coords] = patchify(img, m.patch_size);
      size_t n_patches = rows.rows();
      std::vector<size_t> perm = trng.permutation(n_patches);
      for (size_t j = 0; j < cfg.fractions.size(); ++j) {
        uint64_t fwd_seed = trng.next_u64();
        size_t n_ctx = context_count(cfg.fractions[j], n_patches);
        std::vector<size_t> sel(perm.begin(), perm.begin() + n_ctx);
        TaskBatch task =
            make_patch_task_from_selection(rows, coords, cfg.side, m.patch_size, sel);
        Rng frng(fwd_seed);
        NoGradGuard ng;
        ForwardResult res = forward(params, task, frng, Mode::Eval);
        Accum a = task_metrics(res.pred, task.tgt_patches, task.ctx_indices, 0.5);
        sums[j].nll += a.nll;
        sums[j].mse += a.mse;
        sums[j].ctx_mse += a.ctx_mse;
        sums[j].mid_mse += a.mid_mse;
      }
    }
  } else {
    if (cfg.n_tgt < 1) throw std::invalid_argument("evaluate: n_tgt must be >= 1");
    for (size_t i = 0; i < cfg.n_tasks; ++i) {
      Rng trng(cfg.seed + 1 + i);
      std::vector<double> xs(cfg.n_tgt);
      for (double& x : xs) x = trng.uniform(cfg.x_lo, cfg.x_hi);
      SampledFunction fn = gp_sample(Tensor({cfg.n_tgt, 1}, xs), cfg.kernel, trng);
      Tensor tgt_y = reshape(fn.y, {cfg.n_tgt, 1});
      std::vector<size_t> perm = trng.permutation(cfg.n_tgt);
      for (size_t j = 0; j < cfg.fractions.size(); ++j) {
        uint64_t fwd_seed = trng.next_u64();
        size_t n_ctx = context_count(cfg.fractions[j], cfg.n_tgt);
        std::vector<size_t> sel(perm.begin(), perm.begin() + n_ctx);
        TaskBatch task;
        task.kind = TaskBatch::Kind::Points;
        task.tgt_x = fn.inputs;
        task.tgt_y = tgt_y;
        task.ctx_x = rows_at(fn.inputs, sel);
        task.ctx_y = rows_at(tgt_y, sel);
        task.ctx_indices = sel;
        Rng frng(fwd_seed);
        NoGradGuard ng;
        ForwardResult res = forward(params, task, frng, Mode::Eval);
        Accum a = task_metrics(res.pred, task.tgt_y, task.ctx_indices, 0.0);
        sums[j].nll += a.nll;
        sums[j].mse += a.mse;
        sums[j].ctx_mse += a.ctx_mse;
        sums[j].mid_mse += a.mid_mse;
      }
    }
  }

  EvalReport report;
  double inv = 1.0 / static_cast<double>(cfg.n_tasks);
  for (size_t j = 0; j < cfg.fractions.size(); ++j) {
    EvalRow row;
    row.fraction = cfg.fractions[j];
    row.nll = sums[j].nll * inv;
    row.mse = sums[j].mse * inv;
    row.ctx_mse = sums[j].ctx_mse * inv;
    row.mid_mse = sums[j].mid_mse * inv;
    report.rows.push_back(row);
  }
  return report;
}

PointEvalStats evaluate_points_range(const ModelParams& params, size_t n_tasks, size_t n_tgt,
                                     size_t n_ctx_lo, size_t n_ctx_hi, double x_lo, double x_hi,
                                     const KernelConfig& kernel, uint64_t seed) {
  if (params.cfg.uses_patches()) {
    throw std::invalid_argument("evaluate_points_range: model operates on patches");
  }
  if (n_tasks < 1) throw std::invalid_argument("evaluate_points_range: n_tasks must be >= 1");
  PointEvalStats stats;
  for (size_t i = 0; i < n_tasks; ++i) {
    Rng trng(seed + 1 + i);
    TaskBatch task = make_1d_task(trng, n_ctx_lo, n_ctx_hi, n_tgt, x_lo, x_hi, kernel);
    NoGradGuard ng;
    ForwardResult res = forward(params, task, trng, Mode::Eval);
    Accum a = task_metrics(res.pred, task.tgt_y, task.ctx_indices, 0.0);
    stats.nll += a.nll;
    stats.mse += a.mse;
  }
  stats.nll /= static_cast<double>(n_tasks);
  stats.mse /= static_cast<double>(n_tasks);
  return stats;
}

double constant_predictor_nll(double deviation_mse, double sigma0) {
  return kHalfLog2Pi + std::log(sigma0) + deviation_mse / (2.0 * sigma0 * sigma0);
}

}  // namespace panp
