#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "panp/tensor.hpp"

namespace panp {

class Rng;

/// Affine map x -> x.w + b for row-major batches.
struct Linear {
  Tensor w;  // [in x out]
  Tensor b;  // [out]
};

Linear make_linear(size_t in, size_t out, Rng& rng, double weight_std = 0.02);
Tensor linear(const Linear& l, const Tensor& x);

/// Multi-head attention projections in concatenated-head layout:
/// every matrix is d_model x d_model, heads are column blocks.
struct AttentionParams {
  size_t d_model = 0;
  size_t n_heads = 1;
  Tensor wq, wk, wv, wo;
};

AttentionParams make_attention(size_t d_model, size_t n_heads, Rng& rng);

/// Pre-norm transformer encoder block: x + MHA(LN1(x)), then + MLP(LN2(.))
/// with a GELU hidden activation.
struct EncoderBlockParams {
  AttentionParams attn;
  Tensor ln1_gain, ln1_bias;
  Tensor ln2_gain, ln2_bias;
  Linear fc1, fc2;
};

EncoderBlockParams make_encoder_block(size_t d_model, size_t n_heads, size_t mlp_hidden,
                                      Rng& rng);

/// Shared-kernel linear embedding of flattened P x P grayscale patches;
/// equivalent to a stride-P convolution over the assembled image.
struct PatchEmbedParams {
  size_t patch_size = 0;
  Tensor kernel;  // [P*P x d_model]
  Tensor bias;    // [d_model]
};

PatchEmbedParams make_patch_embed(size_t patch_size, size_t d_model, Rng& rng);

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v);
Tensor multi_head_attention(const AttentionParams& p, const Tensor& q_in, const Tensor& k_in,
                            const Tensor& v_in);
Tensor encoder_block(const EncoderBlockParams& p, const Tensor& x);
Tensor patch_embed(const PatchEmbedParams& p, const Tensor& patches);

/// Fixed 2-D sinusoidal encoding, one row per grid cell in row-major order.
/// The first d_model/2 channels encode the row index, the rest the column
/// index, each with the standard sin/cos frequency ladder.
Tensor position_embedding(size_t grid_h, size_t grid_w, size_t d_model);

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

void append_params(const Linear& l, const std::string& prefix, NamedParams& out);
void append_params(const AttentionParams& p, const std::string& prefix, NamedParams& out);
void append_params(const EncoderBlockParams& p, const std::string& prefix, NamedParams& out);
void append_params(const PatchEmbedParams& p, const std::string& prefix, NamedParams& out);

}  // namespace panp
