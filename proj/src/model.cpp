#include "panp/model.hpp"

#include <stdexcept>
#include <string>

#include "panp/rng.hpp"

namespace panp {

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::NP: return "np";
    case Variant::ANP: return "anp";
    case Variant::PANP: return "panp";
    case Variant::CNP: return "cnp";
  }
  return "?";
}

Variant variant_from_name(const std::string& name) {
  if (name == "np") return Variant::NP;
  if (name == "anp") return Variant::ANP;
  if (name == "panp") return Variant::PANP;
  if (name == "cnp") return Variant::CNP;
  throw std::invalid_argument("unknown model variant '" + name +
                              "' (expected np, anp, panp or cnp)");
}

namespace {

void validate_config(const ModelConfig& cfg) {
  if (cfg.d_model == 0 || cfg.d_model % 2 != 0)
    throw std::invalid_argument("model config: d_model must be positive and even");
  if (cfg.n_heads == 0 || cfg.d_model % cfg.n_heads != 0)
    throw std::invalid_argument("model config: n_heads must divide d_model");
  if (cfg.depth == 0) throw std::invalid_argument("model config: encoder depth must be >= 1");
  if (cfg.has_latent_path() && cfg.latent_dim == 0)
    throw std::invalid_argument("model config: latent dim must be >= 1");
  if (cfg.uses_patches() && cfg.patch_size == 0)
    throw std::invalid_argument("model config: patch size must be >= 1");
  if (cfg.enc_hidden < cfg.d_model)
    throw std::invalid_argument("model config: encoder hidden width below d_model");
  if (!(cfg.sigma_floor > 0.0) || !(cfg.sigma_scale > 0.0))
    throw std::invalid_argument("model config: sigma floor and scale must be positive");
}

Tensor apply_sigma(const Tensor& raw, double floor, double scale) {
  return add_scalar(mul_scalar(softplus(raw), scale), floor);
}

}  // namespace

ModelParams make_model(const ModelConfig& cfg, Rng& rng) {
  validate_config(cfg);
  ModelParams p;
  p.cfg = cfg;
  const size_t d = cfg.d_model;

  if (cfg.uses_patches()) {
    p.patch = make_patch_embed(cfg.patch_size, d, rng);
  } else {
    p.xy_embed = make_linear(2, d, rng);
    p.x_embed = make_linear(1, d, rng);
  }

  if (cfg.has_det_path()) {
    for (size_t i = 0; i < cfg.depth; ++i)
      p.det_blocks.push_back(make_encoder_block(d, cfg.n_heads, cfg.enc_hidden, rng));
    p.cross = make_attention(d, cfg.n_heads, rng);
  }

  if (cfg.has_latent_path()) {
    p.lat.use_attention = cfg.variant != Variant::NP;
    if (p.lat.use_attention) {
      for (size_t i = 0; i < cfg.depth; ++i)
        p.lat.blocks.push_back(make_encoder_block(d, cfg.n_heads, cfg.enc_hidden, rng));
    } else {
      p.lat.enc1 = make_linear(d, cfg.enc_hidden, rng);
      p.lat.enc2 = make_linear(cfg.enc_hidden, d, rng);
    }
    p.lat.head1 = make_linear(d, d, rng);
    p.lat.head2 = make_linear(d, 2 * cfg.latent_dim, rng);
  }

  size_t dec_in = d;  // target position block is always present
  if (cfg.has_latent_path()) dec_in += cfg.latent_dim;
  if (cfg.has_det_path()) dec_in += d;
  size_t width = dec_in;
  for (size_t h : cfg.dec_hidden) {
    p.dec.hidden.push_back(make_linear(width, h, rng));
    width = h;
  }
  p.dec.out = make_linear(width, 2 * cfg.out_dim(), rng);
  return p;
}

NamedParams ModelParams::named_params() const {
  NamedParams out;
  if (cfg.uses_patches()) {
    append_params(patch, "embed.patch", out);
  } else {
    append_params(xy_embed, "embed.xy", out);
    append_params(x_embed, "embed.x", out);
  }
  if (cfg.has_det_path()) {
    for (size_t i = 0; i < det_blocks.size(); ++i)
      append_params(det_blocks[i], "det." + std::to_string(i), out);
    append_params(cross, "cross", out);
  }
  if (cfg.has_latent_path()) {
    if (lat.use_attention) {
      for (size_t i = 0; i < lat.blocks.size(); ++i)
        append_params(lat.blocks[i], "lat." + std::to_string(i), out);
    } else {
      append_params(lat.enc1, "lat.enc1", out);
      append_params(lat.enc2, "lat.enc2", out);
    }
    append_params(lat.head1, "lat.head1", out);
    append_params(lat.head2, "lat.head2", out);
  }
  for (size_t i = 0; i < dec.hidden.size(); ++i)
    append_params(dec.hidden[i], "dec.h" + std::to_string(i), out);
  append_params(dec.out, "dec.out", out);
  return out;
}

Tensor deterministic_encode(const std::vector<EncoderBlockParams>& blocks, const Tensor& tokens) {
  if (!tokens.defined() || tokens.rank() != 2 || tokens.rows() == 0)
    throw std::invalid_argument("deterministic_encode: empty context");
  Tensor h = tokens;
  for (const auto& b : blocks) h = encoder_block(b, h);
  return h;
}

Tensor cross_attend_targets(const AttentionParams& p, const Tensor& r_i, const Tensor& r_c,
                            const Tensor& tgt_pos, const Tensor& ctx_pos) {
  if (r_i.rank() != 2 || r_i.rows() == 0)
    throw std::invalid_argument("cross_attend_targets: empty context");
  if (r_i.shape() != ctx_pos.shape())
    throw std::invalid_argument("cross_attend_targets: context positions shaped " +
                                ctx_pos.shape_str() + ", representations " + r_i.shape_str());
  Tensor q = add(repeat_rows(r_c, tgt_pos.rows()), tgt_pos);
  Tensor k = add(r_i, ctx_pos);
  return multi_head_attention(p, q, k, r_i);
}

LatentState latent_encode(const LatentPathParams& p, const Tensor& tokens, double sigma_floor,
                          double sigma_scale) {
  if (!tokens.defined() || tokens.rank() != 2 || tokens.rows() == 0)
    throw std::invalid_argument("latent_encode: empty context");
  LatentState st;
  if (p.use_attention) {
    Tensor h = tokens;
    for (const auto& b : p.blocks) h = encoder_block(b, h);
    st.s_i = h;
  } else {
    st.s_i = linear(p.enc2, gelu(linear(p.enc1, tokens)));
  }
  st.s = mean_rows(st.s_i);
  Tensor srow = reshape(st.s, {1, st.s.numel()});
  Tensor head_out = linear(p.head2, gelu(linear(p.head1, srow)));
  const size_t latent = head_out.cols() / 2;
  st.mu_z = reshape(slice_cols(head_out, 0, latent), {latent});
  st.sigma_z =
      reshape(apply_sigma(slice_cols(head_out, latent, 2 * latent), sigma_floor, sigma_scale),
              {latent});
  return st;
}

Tensor sample_latent(const LatentState& st, Rng& rng) {
  if (!st.mu_z.defined() || !st.sigma_z.defined())
    throw std::invalid_argument("sample_latent: latent parameters not populated");
  Tensor eps({st.mu_z.numel()});
  for (auto& v : eps.data()) v = rng.gauss();
  return add(st.mu_z, mul(st.sigma_z, eps));
}

PredictiveDistribution decode(const DecoderParams& p, const Tensor& z, const Tensor& r_star,
                              const Tensor& tgt_pos, double sigma_floor, double sigma_scale) {
  if (!tgt_pos.defined() || tgt_pos.rank() != 2)
    throw std::invalid_argument("decode: target positions must be rank-2");
  const size_t n = tgt_pos.rows();
  std::vector<Tensor> cols;
  if (z.defined()) cols.push_back(repeat_rows(z, n));
  if (r_star.defined()) {
    if (r_star.rows() != n)
      throw std::invalid_argument("decode: r_star rows " + std::to_string(r_star.rows()) +
                                  " != target rows " + std::to_string(n));
    cols.push_back(r_star);
  }
  cols.push_back(tgt_pos);
  Tensor h = cols.size() == 1 ? cols[0] : concat_cols(cols);
  for (const auto& l : p.hidden) h = gelu(linear(l, h));
  Tensor out = linear(p.out, h);
  const size_t out_dim = out.cols() / 2;
  PredictiveDistribution pred;
  pred.mu = slice_cols(out, 0, out_dim);
  pred.sigma = apply_sigma(slice_cols(out, out_dim, 2 * out_dim), sigma_floor, sigma_scale);
  return pred;
}

namespace {

std::vector<size_t> coord_cells(const std::vector<GridCoord>& coords, size_t grid) {
  std::vector<size_t> idx;
  idx.reserve(coords.size());
  for (const auto& c : coords) {
    if (c.row >= grid || c.col >= grid)
      throw std::invalid_argument("forward: grid coordinate out of range");
    idx.push_back(c.row * grid + c.col);
  }
  return idx;
}

Tensor concat_xy(const Tensor& x, const Tensor& y) { return concat_cols({x, y}); }

}  // namespace

ForwardResult forward(const ModelParams& params, const TaskBatch& task, Rng& rng, Mode mode) {
  const ModelConfig& cfg = params.cfg;
  ForwardResult res;

  Tensor ctx_tokens, tgt_tokens;  // latent/self-attention inputs
  Tensor ctx_pos, tgt_pos;        // per-element position/coordinate features

  if (cfg.uses_patches()) {
    if (task.kind != TaskBatch::Kind::Patches)
      throw std::invalid_argument("forward: " + variant_name(cfg.variant) +
                                  " expects a patch task");
    if (task.ctx_patches.rows() == 0) throw std::invalid_argument("forward: empty context");
    if (task.side == 0 || task.side % cfg.patch_size != 0 ||
        task.patch_size != cfg.patch_size)
      throw std::invalid_argument("forward: task patch layout does not match model config");
    const size_t grid = task.side / cfg.patch_size;
    Tensor pos_table = position_embedding(grid, grid, cfg.d_model);
    ctx_pos = rows_at(pos_table, coord_cells(task.ctx_coords, grid));
    tgt_pos = rows_at(pos_table, coord_cells(task.tgt_coords, grid));
    ctx_tokens = add(patch_embed(params.patch, task.ctx_patches), ctx_pos);
    if (mode == Mode::Train)
      tgt_tokens = add(patch_embed(params.patch, task.tgt_patches), tgt_pos);
  } else {
    if (task.kind != TaskBatch::Kind::Points)
      throw std::invalid_argument("forward: " + variant_name(cfg.variant) +
                                  " expects a point task");
    if (task.ctx_x.rows() == 0) throw std::invalid_argument("forward: empty context");
    ctx_pos = linear(params.x_embed, task.ctx_x);
    tgt_pos = linear(params.x_embed, task.tgt_x);
    ctx_tokens = linear(params.xy_embed, concat_xy(task.ctx_x, task.ctx_y));
    if (mode == Mode::Train)
      tgt_tokens = linear(params.xy_embed, concat_xy(task.tgt_x, task.tgt_y));
  }

  if (cfg.has_det_path()) {
    res.det.r_i = deterministic_encode(params.det_blocks, ctx_tokens);
    res.det.r_c = mean_rows(res.det.r_i);
    if (cfg.uses_patches()) {
      res.det.r_star =
          cross_attend_targets(params.cross, res.det.r_i, res.det.r_c, tgt_pos, ctx_pos);
    } else {
      // coordinate embeddings act as queries and keys, encoded contexts as values
      res.det.r_star = multi_head_attention(params.cross, tgt_pos, ctx_pos, res.det.r_i);
    }
  }

  if (cfg.has_latent_path()) {
    res.lat_ctx = latent_encode(params.lat, ctx_tokens, cfg.sigma_floor, cfg.sigma_scale);
    if (mode == Mode::Train) {
      res.lat_tgt = latent_encode(params.lat, tgt_tokens, cfg.sigma_floor, cfg.sigma_scale);
      res.z = sample_latent(res.lat_tgt, rng);
    } else {
      res.z = sample_latent(res.lat_ctx, rng);
    }
  }

  res.pred = decode(params.dec, res.z, res.det.r_star, tgt_pos, cfg.sigma_floor,
                    cfg.sigma_scale);
  return res;
}

}  // namespace panp
