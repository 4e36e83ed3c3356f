#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "panp/nn.hpp"
#include "panp/taskgen.hpp"
#include "panp/tensor.hpp"

namespace panp {

class Rng;

enum class Variant { NP, ANP, PANP, CNP };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct ModelConfig {
  Variant variant = Variant::PANP;
  size_t d_model = 64;
  size_t n_heads = 4;
  size_t depth = 2;
  size_t latent_dim = 64;
  size_t enc_hidden = 64;                 // encoder-block MLP width
  std::vector<size_t> dec_hidden = {64, 64};
  size_t patch_size = 4;                  // patch variants only
  double sigma_floor = 0.1;
  double sigma_scale = 0.9;

  bool has_det_path() const { return variant != Variant::NP; }
  bool has_latent_path() const { return variant != Variant::CNP; }
  bool uses_patches() const { return variant == Variant::PANP; }
  size_t out_dim() const { return uses_patches() ? patch_size * patch_size : 1; }
};

/// Latent path: set encoder (stacked self-attention, or a per-row MLP for
/// the NP baseline) followed by the two-layer head producing (mu, raw sigma).
struct LatentPathParams {
  bool use_attention = true;
  std::vector<EncoderBlockParams> blocks;
  Linear enc1, enc2;  // NP set encoder
  Linear head1, head2;
};

struct DecoderParams {
  std::vector<Linear> hidden;
  Linear out;
};

struct ModelParams {
  ModelConfig cfg;

  PatchEmbedParams patch;  // patch token embedding
  Linear xy_embed;         // point (x, y) -> token
  Linear x_embed;          // point x -> coordinate embedding

  std::vector<EncoderBlockParams> det_blocks;
  AttentionParams cross;

  LatentPathParams lat;
  DecoderParams dec;

  /// Every trainable tensor with a stable dotted name, in creation order.
  NamedParams named_params() const;
};

ModelParams make_model(const ModelConfig& cfg, Rng& rng);

struct DeterministicState {
  Tensor r_i;     // [n_ctx x d]
  Tensor r_c;     // [d]
  Tensor r_star;  // [n_tgt x d]
};

struct LatentState {
  Tensor s_i;      // [n x d]
  Tensor s;        // [d]
  Tensor mu_z;     // [latent]
  Tensor sigma_z;  // [latent]
};

struct PredictiveDistribution {
  Tensor mu;     // [n_tgt x out_dim]
  Tensor sigma;  // [n_tgt x out_dim]
};

/// Stacked self-attention over context tokens (positions already added).
Tensor deterministic_encode(const std::vector<EncoderBlockParams>& blocks, const Tensor& tokens);

/// One cross-attention call: query t = r_c + tgt_pos[t], keys r_i + ctx_pos,
/// values r_i.
Tensor cross_attend_targets(const AttentionParams& p, const Tensor& r_i, const Tensor& r_c,
                            const Tensor& tgt_pos, const Tensor& ctx_pos);

LatentState latent_encode(const LatentPathParams& p, const Tensor& tokens, double sigma_floor,
                          double sigma_scale);

/// Reparameterized draw z = mu + sigma * eps; gradient flows through the
/// distribution parameters, not eps.
Tensor sample_latent(const LatentState& st, Rng& rng);

/// Per-target MLP over the concatenation of whichever of [z, r_star, pos]
/// are defined. Undefined tensors are skipped (NP has no r_star, the
/// deterministic-only variant has no z).
PredictiveDistribution decode(const DecoderParams& p, const Tensor& z, const Tensor& r_star,
                              const Tensor& tgt_pos, double sigma_floor, double sigma_scale);

enum class Mode { Train, Eval };

struct ForwardResult {
  PredictiveDistribution pred;
  DeterministicState det;  // populated when the variant has a deterministic path
  LatentState lat_ctx;     // populated when the variant has a latent path
  LatentState lat_tgt;     // train mode only
  Tensor z;                // latent sample used by the decoder
};

ForwardResult forward(const ModelParams& params, const TaskBatch& task, Rng& rng, Mode mode);

}  // namespace panp
