#include "fgaseg/pixel_alignment.hpp"

#include <cmath>

namespace fgaseg {

Tensor sinusoidal_pe(std::int64_t H, std::int64_t W, std::int64_t d) {
  if (d % 2 != 0) throw ConfigError("sinusoidal_pe: d must be even, got " + std::to_string(d));
  const std::int64_t n = H * W;
  std::vector<double> v(static_cast<std::size_t>(n * d));
  for (std::int64_t p = 0; p < n; ++p) {
    for (std::int64_t i = 0; i < d / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      v[static_cast<std::size_t>(p * d + 2 * i)] = std::sin(static_cast<double>(p) * freq);
      v[static_cast<std::size_t>(p * d + 2 * i + 1)] = std::cos(static_cast<double>(p) * freq);
    }
  }
  return Tensor::from_values({n, d}, v);
}

P2TLayer P2TLayer::make(std::int64_t d, std::int64_t heads, Rng& rng) {
  P2TLayer l;
  l.norm_q = LayerNorm::make(d);
  l.norm_kv = LayerNorm::make(d);
  l.attn = Attention::make(d, d, d, heads, rng);
  l.norm_mlp = LayerNorm::make(d);
  l.mlp = Mlp::make(d, 4 * d, rng);
  return l;
}

void P2TLayer::collect(const std::string& prefix, ParamList& out) const {
  norm_q.collect(prefix + ".norm_q", out);
  norm_kv.collect(prefix + ".norm_kv", out);
  attn.collect(prefix + ".attn", out);
  norm_mlp.collect(prefix + ".norm_mlp", out);
  mlp.collect(prefix + ".mlp", out);
}

P2TformerParams P2TformerParams::make(std::int64_t d, std::int64_t layers, std::int64_t heads, double gamma_init,
                                      bool gamma_trainable, Rng& rng) {
  if (layers < 1) throw ConfigError("p2tformer: layer count must be >= 1");
  if (!std::isfinite(gamma_init)) throw ConfigError("p2tformer: gamma must be finite");
  P2TformerParams p;
  p.heads = heads;
  for (std::int64_t i = 0; i < layers; ++i) p.layers.push_back(P2TLayer::make(d, heads, rng));
  p.gamma = const_param({1}, gamma_init);
  p.gamma.set_requires_grad(gamma_trainable);
  return p;
}

void P2TformerParams::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(prefix + ".layer" + std::to_string(i), out);
  if (gamma.requires_grad()) out.push_back({prefix + ".gamma", gamma});
}

Tensor p2t_layer(const Tensor& text_in, const Tensor& vision_kv, const P2TLayer& layer) {
  Tensor x = add(text_in, layer.attn(layer.norm_q(text_in), layer.norm_kv(vision_kv)));
  return add(x, layer.mlp(layer.norm_mlp(x)));
}

Tensor p2tformer_forward(const Tensor& V_I, const Tensor& V_T, const P2TformerParams& params) {
  if (V_I.rank() != 4 || V_T.rank() != 3 || V_I.dim(0) != V_T.dim(0) || V_I.dim(1) != V_T.dim(2)) {
    throw DimensionError("p2tformer: V_I " + shape_str(V_I.shape()) + " and V_T " + shape_str(V_T.shape()) +
                         " are inconsistent");
  }
  const std::int64_t B = V_I.dim(0), C = V_I.dim(1), H = V_I.dim(2), W = V_I.dim(3);
  Tensor flat = permute(reshape(V_I, {B, C, H * W}), {0, 2, 1});
  Tensor kv = add(flat, sinusoidal_pe(H, W, C).to(flat.dtype()));
  Tensor x = V_T;
  for (const auto& layer : params.layers) x = p2t_layer(x, kv, layer);
  return add(V_T, mul(params.gamma, x));
}

T2PHeadParams T2PHeadParams::make(std::int64_t C, std::int64_t d, std::int64_t K, Rng& rng) {
  if (K % 2 == 0) throw ConfigError("t2p_head: kernel size must be odd, got " + std::to_string(K));
  if (C % 2 != 0) throw ConfigError("t2p_head: C must be even");
  T2PHeadParams p;
  p.K = K;
  p.vision_proj = Linear::make(C, (C / 2) * 16, rng);
  p.kernel_proj = Linear::make(d, (C / 2) * K * K, rng);
  p.bias_proj = Linear::make(d, 1, rng);
  return p;
}

void T2PHeadParams::collect(const std::string& prefix, ParamList& out) const {
  vision_proj.collect(prefix + ".vision_proj", out);
  kernel_proj.collect(prefix + ".kernel_proj", out);
  bias_proj.collect(prefix + ".bias_proj", out);
}

AlignmentResponse t2p_head(const Tensor& V_I, const Tensor& V_T, const T2PHeadParams& params,
                           std::int64_t mask_h, std::int64_t mask_w) {
  if (V_I.rank() != 4 || V_T.rank() != 3 || V_I.dim(0) != V_T.dim(0)) {
    throw DimensionError("t2p_head: V_I " + shape_str(V_I.shape()) + " and V_T " + shape_str(V_T.shape()) +
                         " are inconsistent");
  }
  const std::int64_t B = V_I.dim(0), T = V_T.dim(1);
  const std::int64_t Cp = params.channels(), K = params.K;
  Tensor proj = params.vision_proj(permute(V_I, {0, 2, 3, 1}));
  Tensor V_I_prime = pixel_shuffle(permute(proj, {0, 3, 1, 2}), 4);
  Tensor kernels = reshape(params.kernel_proj(V_T), {B, T, Cp, K, K});
  Tensor bias = reshape(params.bias_proj(V_T), {B, T});
  AlignmentResponse r;
  r.O = dyn_conv2d(V_I_prime, kernels, bias);
  r.O_align = bilinear_resize(r.O, mask_h, mask_w);
  return r;
}

Tensor t2p_loss(const Tensor& O_align, const std::vector<int>& labels) {
  if (O_align.rank() != 4) throw DimensionError("t2p_loss: expected B x T x H x W, got " + shape_str(O_align.shape()));
  const std::int64_t B = O_align.dim(0), T = O_align.dim(1);
  Tensor target = one_hot(labels, B, T, {O_align.dim(2), O_align.dim(3)}, O_align.dtype());
  return mse_loss(O_align, target);
}

}  // namespace fgaseg
