#include "panp/nn.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "panp/rng.hpp"

namespace panp {

Linear make_linear(size_t in, size_t out, Rng& rng, double weight_std) {
  Linear l;
  l.w = Tensor::randn({in, out}, rng, weight_std, true);
  l.b = Tensor({out}, true);
  return l;
}

Tensor linear(const Linear& l, const Tensor& x) { return add(matmul(x, l.w), l.b); }

AttentionParams make_attention(size_t d_model, size_t n_heads, Rng& rng) {
  if (n_heads == 0 || d_model % n_heads != 0)
    throw std::invalid_argument("make_attention: d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " + std::to_string(n_heads));
  AttentionParams p;
  p.d_model = d_model;
  p.n_heads = n_heads;
  p.wq = Tensor::randn({d_model, d_model}, rng, 0.02, true);
  p.wk = Tensor::randn({d_model, d_model}, rng, 0.02, true);
  p.wv = Tensor::randn({d_model, d_model}, rng, 0.02, true);
  p.wo = Tensor::randn({d_model, d_model}, rng, 0.02, true);
  return p;
}

EncoderBlockParams make_encoder_block(size_t d_model, size_t n_heads, size_t mlp_hidden,
                                      Rng& rng) {
  if (mlp_hidden < d_model)
    throw std::invalid_argument("make_encoder_block: mlp hidden width " +
                                std::to_string(mlp_hidden) + " below d_model " +
                                std::to_string(d_model));
  EncoderBlockParams p;
  p.attn = make_attention(d_model, n_heads, rng);
  p.ln1_gain = Tensor::full({d_model}, 1.0, true);
  p.ln1_bias = Tensor({d_model}, true);
  p.ln2_gain = Tensor::full({d_model}, 1.0, true);
  p.ln2_bias = Tensor({d_model}, true);
  p.fc1 = make_linear(d_model, mlp_hidden, rng);
  p.fc2 = make_linear(mlp_hidden, d_model, rng);
  return p;
}

PatchEmbedParams make_patch_embed(size_t patch_size, size_t d_model, Rng& rng) {
  if (patch_size == 0) throw std::invalid_argument("make_patch_embed: patch size must be positive");
  PatchEmbedParams p;
  p.patch_size = patch_size;
  p.kernel = Tensor::randn({patch_size * patch_size, d_model}, rng, 0.02, true);
  p.bias = Tensor({d_model}, true);
  return p;
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
    throw std::invalid_argument("scaled_dot_attention: Q, K, V must be rank-2");
  if (k.rows() == 0) throw std::invalid_argument("attention requires >=1 context");
  if (k.rows() != v.rows())
    throw std::invalid_argument("scaled_dot_attention: K has " + std::to_string(k.rows()) +
                                " rows but V has " + std::to_string(v.rows()));
  if (q.cols() != k.cols())
    throw std::invalid_argument("scaled_dot_attention: Q width " + std::to_string(q.cols()) +
                                " differs from K width " + std::to_string(k.cols()));
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Tensor weights = softmax(mul_scalar(matmul_nt(q, k), scale), 1);
  return matmul(weights, v);
}

Tensor multi_head_attention(const AttentionParams& p, const Tensor& q_in, const Tensor& k_in,
                            const Tensor& v_in) {
  if (q_in.cols() != p.d_model || k_in.cols() != p.d_model || v_in.cols() != p.d_model)
    throw std::invalid_argument("multi_head_attention: input width must equal d_model " +
                                std::to_string(p.d_model));
  if (p.n_heads == 0 || p.d_model % p.n_heads != 0)
    throw std::invalid_argument("multi_head_attention: d_model not divisible by n_heads");
  Tensor q = matmul(q_in, p.wq);
  Tensor k = matmul(k_in, p.wk);
  Tensor v = matmul(v_in, p.wv);
  const size_t dh = p.d_model / p.n_heads;
  std::vector<Tensor> heads;
  heads.reserve(p.n_heads);
  for (size_t h = 0; h < p.n_heads; ++h) {
    const size_t c0 = h * dh, c1 = c0 + dh;
    heads.push_back(
        scaled_dot_attention(slice_cols(q, c0, c1), slice_cols(k, c0, c1), slice_cols(v, c0, c1)));
  }
  Tensor joined = p.n_heads == 1 ? heads[0] : concat_cols(heads);
  return matmul(joined, p.wo);
}

Tensor encoder_block(const EncoderBlockParams& p, const Tensor& x) {
  Tensor normed = layer_norm(x, p.ln1_gain, p.ln1_bias);
  Tensor h = add(x, multi_head_attention(p.attn, normed, normed, normed));
  Tensor mlp_in = layer_norm(h, p.ln2_gain, p.ln2_bias);
  Tensor mlp_out = linear(p.fc2, gelu(linear(p.fc1, mlp_in)));
  return add(h, mlp_out);
}

Tensor patch_embed(const PatchEmbedParams& p, const Tensor& patches) {
  if (patches.rank() != 2 || patches.cols() != p.patch_size * p.patch_size)
    throw std::invalid_argument("patch_embed: expected rows of " +
                                std::to_string(p.patch_size * p.patch_size) +
                                " pixels, got shape " + patches.shape_str());
  for (double v : patches.data())
    if (!(v >= 0.0 && v <= 1.0))
      throw std::invalid_argument("patch_embed: pixel value " + std::to_string(v) +
                                  " outside [0, 1]");
  return add(matmul(patches, p.kernel), p.bias);
}

Tensor position_embedding(size_t grid_h, size_t grid_w, size_t d_model) {
  if (d_model % 2 != 0)
    throw std::invalid_argument("position_embedding: d_model must be even, got " +
                                std::to_string(d_model));
  const size_t half = d_model / 2;
  Tensor out({grid_h * grid_w, d_model});
  auto fill_half = [&](size_t cell, size_t offset, double pos) {
    for (size_t j = 0; j < half; ++j) {
      const double omega = std::pow(10000.0, -2.0 * static_cast<double>(j / 2) / half);
      const double angle = pos * omega;
      out.data()[cell * d_model + offset + j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  };
  for (size_t r = 0; r < grid_h; ++r)
    for (size_t c = 0; c < grid_w; ++c) {
      const size_t cell = r * grid_w + c;
      fill_half(cell, 0, static_cast<double>(r));
      fill_half(cell, half, static_cast<double>(c));
    }
  return out;
}

void append_params(const Linear& l, const std::string& prefix, NamedParams& out) {
  out.emplace_back(prefix + ".w", l.w);
  out.emplace_back(prefix + ".b", l.b);
}

void append_params(const AttentionParams& p, const std::string& prefix, NamedParams& out) {
  out.emplace_back(prefix + ".wq", p.wq);
  out.emplace_back(prefix + ".wk", p.wk);
  out.emplace_back(prefix + ".wv", p.wv);
  out.emplace_back(prefix + ".wo", p.wo);
}

void append_params(const EncoderBlockParams& p, const std::string& prefix, NamedParams& out) {
  append_params(p.attn, prefix + ".attn", out);
  out.emplace_back(prefix + ".ln1.g", p.ln1_gain);
  out.emplace_back(prefix + ".ln1.b", p.ln1_bias);
  out.emplace_back(prefix + ".ln2.g", p.ln2_gain);
  out.emplace_back(prefix + ".ln2.b", p.ln2_bias);
  append_params(p.fc1, prefix + ".fc1", out);
  append_params(p.fc2, prefix + ".fc2", out);
}

void append_params(const PatchEmbedParams& p, const std::string& prefix, NamedParams& out) {
  out.emplace_back(prefix + ".kernel", p.kernel);
  out.emplace_back(prefix + ".bias", p.bias);
}

}  // namespace panp
