#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "panp/tensor.hpp"

namespace panp {

class Rng;

/// RBF kernel hyperparameters plus the Cholesky stabilization jitter.
struct KernelConfig {
  double lengthscale = 0.2;
  double signal_var = 1.0;
  double noise_std = 0.02;
  double jitter = 1e-6;
};

/// One function drawn from the GP prior, observed with noise.
struct SampledFunction {
  Tensor inputs;  // [n x d_in]
  Tensor f;       // [n] clean values
  Tensor y;       // [n] f + noise_std * eps
};

struct GridCoord {
  size_t row = 0;
  size_t col = 0;
};

/// One training or evaluation episode. Contexts are always a subset of the
/// targets; ctx_indices maps each context to its position among the targets.
struct TaskBatch {
  enum class Kind { Points, Patches };
  Kind kind = Kind::Points;

  Tensor ctx_x, ctx_y;  // points: [n_ctx x 1] each
  Tensor tgt_x, tgt_y;  // points: [n_tgt x 1] each

  size_t side = 0;
  size_t patch_size = 0;
  Tensor ctx_patches, tgt_patches;  // patches: [n x P*P] pixel rows
  std::vector<GridCoord> ctx_coords, tgt_coords;

  std::vector<size_t> ctx_indices;  // positions of contexts within targets
};

/// K[i,j] = signal_var * exp(-|x1_i - x2_j|^2 / (2 lengthscale^2)).
Tensor rbf_kernel(const Tensor& x1, const Tensor& x2, const KernelConfig& cfg);

/// Draws f = L eps with K = rbf_kernel(xs, xs) + jitter I = L L^T, then
/// y = f + noise_std * eps'. Escalates jitter tenfold (up to 1e-2) if the
/// factorization fails.
SampledFunction gp_sample(const Tensor& xs, const KernelConfig& cfg, Rng& rng);

TaskBatch make_1d_task(Rng& rng, size_t n_ctx_lo, size_t n_ctx_hi, size_t n_tgt, double x_lo,
                       double x_hi, const KernelConfig& cfg);

/// Caches the grid Cholesky factor so repeated image draws cost one matvec.
class ImageGpSampler {
 public:
  ImageGpSampler(size_t side, const KernelConfig& cfg);
  /// 2-D GP sample over the [0,1]^2 pixel grid, noisy, affinely
  /// renormalized to [0,1]. Shape [side x side].
  Tensor sample(Rng& rng) const;
  size_t side() const { return side_; }

 private:
  size_t side_;
  KernelConfig cfg_;
  std::vector<double> chol_;  // lower factor, row-major [side^2 x side^2]
};

Tensor make_image_task(Rng& rng, size_t side, const KernelConfig& cfg);

/// Row-major patch slicing: row pr*(S/P)+pc holds the row-major flattening
/// of the P x P patch at grid cell (pr, pc).
std::pair<Tensor, std::vector<GridCoord>> patchify(const Tensor& img, size_t patch_size);

Tensor unpatchify(const Tensor& patch_rows, const std::vector<GridCoord>& coords,
                  size_t patch_size, size_t side);

/// Contexts = random ceil(fraction * n) patches, targets = all patches.
TaskBatch split_context_target_patches(const Tensor& patch_rows,
                                       const std::vector<GridCoord>& coords, size_t side,
                                       size_t patch_size, Rng& rng, double ctx_fraction);

/// Same split with the context subset chosen by the caller.
TaskBatch make_patch_task_from_selection(const Tensor& patch_rows,
                                         const std::vector<GridCoord>& coords, size_t side,
                                         size_t patch_size,
                                         const std::vector<size_t>& ctx_selection);

}  // namespace panp
