#include "fgaseg/category_supplement.hpp"

namespace fgaseg {

Tensor gcs(const Tensor& V_T_emb, const Tensor& V_I) {
  if (V_T_emb.rank() != 3 || V_I.rank() != 4 || V_T_emb.dim(0) != V_I.dim(0) || V_T_emb.dim(2) != V_I.dim(1)) {
    throw DimensionError("gcs: V_T_emb " + shape_str(V_T_emb.shape()) + " and V_I " + shape_str(V_I.shape()) +
                         " are inconsistent");
  }
  const std::int64_t B = V_I.dim(0), C = V_I.dim(1), H = V_I.dim(2), W = V_I.dim(3), T = V_T_emb.dim(1);
  Tensor text = l2_normalize(V_T_emb);
  Tensor pix = l2_normalize(permute(reshape(V_I, {B, C, H * W}), {0, 2, 1}));
  return reshape(matmul(text, transpose(pix, 1, 2)), {B, T, H, W});
}

LcsParams LcsParams::make(std::int64_t d, std::int64_t C, std::int64_t K, bool kernel_norm, Rng& rng) {
  if (K % 2 == 0) throw ConfigError("lcs: kernel size must be odd, got " + std::to_string(K));
  LcsParams p;
  p.W_txt = Linear::make(d, C * K * K, rng);
  p.bias = Linear::make(d, 1, rng);
  p.C = C;
  p.K = K;
  p.kernel_norm = kernel_norm;
  return p;
}

void LcsParams::collect(const std::string& prefix, ParamList& out) const {
  W_txt.collect(prefix + ".W_txt", out);
  bias.collect(prefix + ".bias", out);
}

LcsKernels lcs_kernels(const Tensor& V_T_emb, const LcsParams& params) {
  if (V_T_emb.rank() != 3) throw DimensionError("lcs_kernels: expected B x T x d, got " + shape_str(V_T_emb.shape()));
  const std::int64_t B = V_T_emb.dim(0), T = V_T_emb.dim(1), C = params.C, K = params.K;
  Tensor proj = params.W_txt(V_T_emb);
  if (params.kernel_norm) proj = softmax(proj, -1);
  Tensor shuffled = pixel_shuffle(reshape(proj, {B * T, C * K * K, 1, 1}), K);
  return {reshape(shuffled, {B, T, C, K, K}), reshape(params.bias(V_T_emb), {B, T})};
}

Tensor lcs(const Tensor& V_I, const LcsKernels& kernels) {
  return depthwise_conv2d(V_I, kernels.weights, kernels.bias);
}

FusionParams FusionParams::make(std::int64_t d_f, Rng& rng) { return {Linear::make(2, d_f, rng)}; }

void FusionParams::collect(const std::string& prefix, ParamList& out) const { proj.collect(prefix + ".proj", out); }

Tensor fuse_pseudo_masks(const Tensor& S_g, const Tensor& S_l, const FusionParams& params) {
  if (S_g.shape() != S_l.shape() || S_g.rank() != 4) {
    throw DimensionError("fuse_pseudo_masks: S_g " + shape_str(S_g.shape()) + " and S_l " +
                         shape_str(S_l.shape()) + " must both be B x T x H x W");
  }
  Shape s = S_g.shape();
  s.push_back(1);
  Tensor stacked = concat({reshape(S_g, s), reshape(S_l, s)}, -1);
  return gelu(params.proj(stacked));
}

void ClassAggLayer::collect(const std::string& prefix, ParamList& out) const {
  norm.collect(prefix + ".norm", out);
  attn.collect(prefix + ".attn", out);
  norm_mlp.collect(prefix + ".norm_mlp", out);
  mlp.collect(prefix + ".mlp", out);
}

ClassAggregationParams ClassAggregationParams::make(std::int64_t d_f, std::int64_t d, std::int64_t heads, Rng& rng,
                                                    std::int64_t n_layers) {
  ClassAggregationParams p;
  for (std::int64_t i = 0; i < n_layers; ++i) {
    ClassAggLayer l;
    l.norm = LayerNorm::make(d_f);
    l.attn = Attention::make(d_f + d, d_f, d_f, heads, rng);
    l.norm_mlp = LayerNorm::make(d_f);
    l.mlp = Mlp::make(d_f, 4 * d_f, rng);
    p.layers.push_back(std::move(l));
  }
  return p;
}

void ClassAggregationParams::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(prefix + ".layer" + std::to_string(i), out);
}

Tensor class_aggregation(const Tensor& F, const Tensor& text_guidance, const ClassAggregationParams& params) {
  if (F.rank() != 5 || text_guidance.rank() != 3 || text_guidance.dim(0) != F.dim(0) ||
      text_guidance.dim(1) != F.dim(1)) {
    throw DimensionError("class_aggregation: F " + shape_str(F.shape()) + " and guidance " +
                         shape_str(text_guidance.shape()) + " are inconsistent");
  }
  const std::int64_t B = F.dim(0), T = F.dim(1), H = F.dim(2), W = F.dim(3), d = text_guidance.dim(2);
  // Pixels become the batch, categories the sequence.
  Tensor x = permute(F, {0, 2, 3, 1, 4});
  Tensor guide = broadcast_to(reshape(text_guidance, {B, 1, 1, T, d}), {B, H, W, T, d});
  for (const auto& layer : params.layers) {
    Tensor n = layer.norm(x);
    x = add(x, layer.attn(concat({n, guide}, -1), n));
    x = add(x, layer.mlp(layer.norm_mlp(x)));
  }
  return permute(x, {0, 3, 1, 2, 4});
}

SpatialAggregationParams SpatialAggregationParams::make(std::int64_t d_f, std::int64_t C, std::int64_t heads,
                                                        std::int64_t window, Rng& rng) {
  if (window < 1) throw ConfigError("spatial_aggregation: window must be positive");
  SpatialAggregationParams p;
  p.guidance_proj = Linear::make(2 * C, d_f, rng);
  p.norm = LayerNorm::make(d_f);
  p.attn = Attention::make(2 * d_f, 2 * d_f, d_f, heads, rng);
  p.norm_mlp = LayerNorm::make(d_f);
  p.mlp = Mlp::make(d_f, 4 * d_f, rng);
  p.window = window;
  return p;
}

void SpatialAggregationParams::collect(const std::string& prefix, ParamList& out) const {
  guidance_proj.collect(prefix + ".guidance_proj", out);
  norm.collect(prefix + ".norm", out);
  attn.collect(prefix + ".attn", out);
  norm_mlp.collect(prefix + ".norm_mlp", out);
  mlp.collect(prefix + ".mlp", out);
}

Tensor spatial_aggregation(const Tensor& F, const std::array<Tensor, 2>& guidance,
                           const SpatialAggregationParams& params) {
  if (F.rank() != 5) throw DimensionError("spatial_aggregation: expected B x T x H x W x d_f");
  const std::int64_t B = F.dim(0), T = F.dim(1), H = F.dim(2), W = F.dim(3), df = F.dim(4);
  for (const auto& g : guidance) {
    if (g.rank() != 4 || g.dim(0) != B || g.dim(2) != H || g.dim(3) != W) {
      throw DimensionError("spatial_aggregation: guidance " + shape_str(g.shape()) + " does not match F " +
                           shape_str(F.shape()));
    }
  }
  const std::int64_t ws = params.window;
  Tensor g = permute(concat({guidance[0], guidance[1]}, 1), {0, 2, 3, 1});
  Tensor gp = broadcast_to(reshape(params.guidance_proj(g), {B, 1, H, W, df}), {B, T, H, W, df});
  Tensor tokens = concat({params.norm(F), gp}, -1);

  const std::int64_t Hp = (H + ws - 1) / ws * ws, Wp = (W + ws - 1) / ws * ws;
  tokens = pad(pad(tokens, 2, 0, Hp - H), 3, 0, Wp - W);
  const std::int64_t nh = Hp / ws, nw = Wp / ws;
  Tensor win = reshape(tokens, {B, T, nh, ws, nw, ws, 2 * df});
  win = reshape(permute(win, {0, 1, 2, 4, 3, 5, 6}), {B * T * nh * nw, ws * ws, 2 * df});
  Tensor att = params.attn(win, win);
  att = permute(reshape(att, {B, T, nh, nw, ws, ws, df}), {0, 1, 2, 4, 3, 5, 6});
  att = reshape(att, {B, T, Hp, Wp, df});
  if (Hp != H) att = slice(att, 2, 0, H);
  if (Wp != W) att = slice(att, 3, 0, W);

  Tensor x = add(F, att);
  return add(x, params.mlp(params.norm_mlp(x)));
}

}  // namespace fgaseg
