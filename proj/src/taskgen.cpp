#include "panp/taskgen.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "panp/rng.hpp"

namespace panp {

namespace {

void check_kernel_config(const KernelConfig& cfg) {
  if (!(cfg.lengthscale > 0.0) || !(cfg.signal_var > 0.0) || !(cfg.noise_std >= 0.0) ||
      !(cfg.jitter > 0.0))
    throw std::invalid_argument("kernel config: lengthscale, signal variance and jitter must be "
                                "positive, noise std non-negative");
}

// In-place lower Cholesky of a row-major n x n matrix; false if not PD.
bool cholesky_lower(std::vector<double>& a, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j <= i; ++j) {
      double s = a[i * n + j];
      for (size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      if (i == j) {
        if (s <= 0.0) return false;
        a[i * n + i] = std::sqrt(s);
      } else {
        a[i * n + j] = s / a[j * n + j];
      }
    }
    for (size_t j = i + 1; j < n; ++j) a[i * n + j] = 0.0;
  }
  return true;
}

std::vector<double> factor_with_escalation(const std::vector<double>& k, size_t n,
                                           double jitter) {
  for (double jit = jitter; jit <= 1e-2 * (1.0 + 1e-12); jit *= 10.0) {
    std::vector<double> a = k;
    for (size_t i = 0; i < n; ++i) a[i * n + i] += jit;
    if (cholesky_lower(a, n)) return a;
  }
  throw std::runtime_error("gp_sample: covariance not positive definite even at jitter 1e-2");
}

std::vector<double> chol_matvec_gauss(const std::vector<double>& l, size_t n, Rng& rng) {
  std::vector<double> eps(n);
  for (auto& e : eps) e = rng.gauss();
  std::vector<double> out(n, 0.0);
  for (size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (size_t j = 0; j <= i; ++j) s += l[i * n + j] * eps[j];
    out[i] = s;
  }
  return out;
}

}  // namespace

Tensor rbf_kernel(const Tensor& x1, const Tensor& x2, const KernelConfig& cfg) {
  check_kernel_config(cfg);
  if (x1.rank() != 2 || x2.rank() != 2 || x1.cols() != x2.cols())
    throw std::invalid_argument("rbf_kernel: inputs must be rank-2 with equal widths, got " +
                                x1.shape_str() + " and " + x2.shape_str());
  const size_t n = x1.rows(), m = x2.rows(), d = x1.cols();
  const double inv2l2 = 1.0 / (2.0 * cfg.lengthscale * cfg.lengthscale);
  Tensor k({n, m});
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < m; ++j) {
      double d2 = 0.0;
      for (size_t c = 0; c < d; ++c) {
        const double delta = x1.at(i, c) - x2.at(j, c);
        d2 += delta * delta;
      }
      k.data()[i * m + j] = cfg.signal_var * std::exp(-d2 * inv2l2);
    }
  return k;
}

SampledFunction gp_sample(const Tensor& xs, const KernelConfig& cfg, Rng& rng) {
  if (xs.rank() != 2 || xs.rows() == 0)
    throw std::invalid_argument("gp_sample: need at least one input row, got shape " +
                                xs.shape_str());
  const size_t n = xs.rows();
  Tensor k = rbf_kernel(xs, xs, cfg);
  std::vector<double> l = factor_with_escalation(k.data(), n, cfg.jitter);
  std::vector<double> f = chol_matvec_gauss(l, n, rng);
  std::vector<double> y = f;
  if (cfg.noise_std > 0.0)
    for (auto& v : y) v += cfg.noise_std * rng.gauss();
  SampledFunction s;
  s.inputs = xs;
  s.f = Tensor({n}, std::move(f));
  s.y = Tensor({n}, std::move(y));
  return s;
}

TaskBatch make_1d_task(Rng& rng, size_t n_ctx_lo, size_t n_ctx_hi, size_t n_tgt, double x_lo,
                       double x_hi, const KernelConfig& cfg) {
  if (n_ctx_lo == 0 || n_ctx_hi < n_ctx_lo || n_ctx_hi > n_tgt)
    throw std::invalid_argument("make_1d_task: need 1 <= n_ctx_lo <= n_ctx_hi <= n_tgt");
  if (!(x_lo < x_hi)) throw std::invalid_argument("make_1d_task: empty x range");
  Tensor xs({n_tgt, 1});
  for (size_t i = 0; i < n_tgt; ++i) xs.data()[i] = rng.uniform(x_lo, x_hi);
  SampledFunction fn = gp_sample(xs, cfg, rng);

  const size_t n_ctx = static_cast<size_t>(rng.uniform_int(static_cast<long long>(n_ctx_lo),
                                                           static_cast<long long>(n_ctx_hi)));
  std::vector<size_t> perm = rng.permutation(n_tgt);
  std::vector<size_t> ctx(perm.begin(), perm.begin() + n_ctx);

  TaskBatch t;
  t.kind = TaskBatch::Kind::Points;
  t.tgt_x = xs;
  t.tgt_y = reshape(fn.y, {n_tgt, 1});
  t.ctx_x = rows_at(t.tgt_x, ctx);
  t.ctx_y = rows_at(t.tgt_y, ctx);
  t.ctx_indices = std::move(ctx);
  return t;
}

ImageGpSampler::ImageGpSampler(size_t side, const KernelConfig& cfg) : side_(side), cfg_(cfg) {
  check_kernel_config(cfg);
  if (side == 0 || side > 32)
    throw std::invalid_argument("image sampler: side must be in [1, 32], got " +
                                std::to_string(side));
  const size_t n = side * side;
  Tensor coords({n, 2});
  const double denom = side > 1 ? static_cast<double>(side - 1) : 1.0;
  for (size_t r = 0; r < side; ++r)
    for (size_t c = 0; c < side; ++c) {
      coords.data()[(r * side + c) * 2 + 0] = static_cast<double>(r) / denom;
      coords.data()[(r * side + c) * 2 + 1] = static_cast<double>(c) / denom;
    }
  Tensor k = rbf_kernel(coords, coords, cfg);
  chol_ = factor_with_escalation(k.data(), n, cfg.jitter);
}

Tensor ImageGpSampler::sample(Rng& rng) const {
  const size_t n = side_ * side_;
  std::vector<double> y = chol_matvec_gauss(chol_, n, rng);
  if (cfg_.noise_std > 0.0)
    for (auto& v : y) v += cfg_.noise_std * rng.gauss();
  double lo = y[0], hi = y[0];
  for (double v : y) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi - lo < 1e-12) {
    std::fill(y.begin(), y.end(), 0.5);
  } else {
    const double inv = 1.0 / (hi - lo);
    for (auto& v : y) v = (v - lo) * inv;
  }
  return Tensor({side_, side_}, std::move(y));
}

Tensor make_image_task(Rng& rng, size_t side, const KernelConfig& cfg) {
  return ImageGpSampler(side, cfg).sample(rng);
}

std::pair<Tensor, std::vector<GridCoord>> patchify(const Tensor& img, size_t patch_size) {
  if (img.rank() != 2 || img.rows() != img.cols())
    throw std::invalid_argument("patchify: expected a square image, got shape " + img.shape_str());
  const size_t s = img.rows();
  if (patch_size == 0 || s % patch_size != 0)
    throw std::invalid_argument("patchify: patch size " + std::to_string(patch_size) +
                                " does not divide image side " + std::to_string(s));
  const size_t g = s / patch_size, pp = patch_size * patch_size;
  Tensor rows({g * g, pp});
  std::vector<GridCoord> coords(g * g);
  for (size_t pr = 0; pr < g; ++pr)
    for (size_t pc = 0; pc < g; ++pc) {
      const size_t cell = pr * g + pc;
      coords[cell] = {pr, pc};
      for (size_t a = 0; a < patch_size; ++a)
        for (size_t b = 0; b < patch_size; ++b)
          rows.data()[cell * pp + a * patch_size + b] =
              img.at(pr * patch_size + a, pc * patch_size + b);
    }
  return {std::move(rows), std::move(coords)};
}

Tensor unpatchify(const Tensor& patch_rows, const std::vector<GridCoord>& coords,
                  size_t patch_size, size_t side) {
  if (patch_size == 0 || side % patch_size != 0)
    throw std::invalid_argument("unpatchify: patch size " + std::to_string(patch_size) +
                                " does not divide side " + std::to_string(side));
  const size_t g = side / patch_size, pp = patch_size * patch_size;
  if (patch_rows.rank() != 2 || patch_rows.cols() != pp)
    throw std::invalid_argument("unpatchify: patch rows have shape " + patch_rows.shape_str() +
                                ", expected width " + std::to_string(pp));
  if (patch_rows.rows() != coords.size() || coords.size() != g * g)
    throw std::invalid_argument("unpatchify: got " + std::to_string(patch_rows.rows()) +
                                " rows and " + std::to_string(coords.size()) +
                                " coordinates for a " + std::to_string(g * g) + "-patch grid");
  Tensor img({side, side});
  for (size_t i = 0; i < coords.size(); ++i) {
    if (coords[i].row >= g || coords[i].col >= g)
      throw std::invalid_argument("unpatchify: grid coordinate out of range");
    for (size_t a = 0; a < patch_size; ++a)
      for (size_t b = 0; b < patch_size; ++b)
        img.data()[(coords[i].row * patch_size + a) * side + coords[i].col * patch_size + b] =
            patch_rows.at(i, a * patch_size + b);
  }
  return img;
}

TaskBatch make_patch_task_from_selection(const Tensor& patch_rows,
                                         const std::vector<GridCoord>& coords, size_t side,
                                         size_t patch_size,
                                         const std::vector<size_t>& ctx_selection) {
  if (patch_rows.rank() != 2 || patch_rows.rows() != coords.size())
    throw std::invalid_argument("patch task: rows/coordinates count mismatch");
  if (ctx_selection.empty())
    throw std::invalid_argument("patch task: context selection must not be empty");
  TaskBatch t;
  t.kind = TaskBatch::Kind::Patches;
  t.side = side;
  t.patch_size = patch_size;
  t.tgt_patches = patch_rows;
  t.tgt_coords = coords;
  t.ctx_patches = rows_at(patch_rows, ctx_selection);
  t.ctx_coords.reserve(ctx_selection.size());
  for (size_t idx : ctx_selection) {
    if (idx >= coords.size())
      throw std::invalid_argument("patch task: context index out of range");
    t.ctx_coords.push_back(coords[idx]);
  }
  t.ctx_indices = ctx_selection;
  return t;
}

TaskBatch split_context_target_patches(const Tensor& patch_rows,
                                       const std::vector<GridCoord>& coords, size_t side,
                                       size_t patch_size, Rng& rng, double ctx_fraction) {
  if (!(ctx_fraction > 0.0 && ctx_fraction <= 1.0))
    throw std::invalid_argument("split: context fraction must lie in (0, 1]");
  const size_t n = coords.size();
  const size_t n_ctx =
      std::min(n, static_cast<size_t>(std::ceil(ctx_fraction * static_cast<double>(n))));
  std::vector<size_t> perm = rng.permutation(n);
  std::vector<size_t> sel(perm.begin(), perm.begin() + n_ctx);
  return make_patch_task_from_selection(patch_rows, coords, side, patch_size, sel);
}

}  // namespace panp
