#pragma once

// Pixel-to-text cross-attention (P2Tformer) and the text-to-pixel alignment
// head with its MSE loss.

#include <cstdint>
#include <vector>

#include "fgaseg/nn.hpp"

namespace fgaseg {

/// Sine/cosine encoding of the flattened raster index p = y*W + x:
/// pe[p, 2i] = sin(p / 10000^{2i/d}), pe[p, 2i+1] = cos(p / 10000^{2i/d}).
Tensor sinusoidal_pe(std::int64_t H, std::int64_t W, std::int64_t d);

struct P2TLayer {
  LayerNorm norm_q;
  LayerNorm norm_kv;
  Attention attn;
  LayerNorm norm_mlp;
  Mlp mlp;

  static P2TLayer make(std::int64_t d, std::int64_t heads, Rng& rng);
  void collect(const std::string& prefix, ParamList& out) const;
};

struct P2TformerParams {
  std::vector<P2TLayer> layers;
  Tensor gamma;  // shape {1}
  std::int64_t heads = 4;

  static P2TformerParams make(std::int64_t d, std::int64_t layers, std::int64_t heads, double gamma_init,
                              bool gamma_trainable, Rng& rng);
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Pre-norm cross-attention (text queries, vision keys/values) with a
/// residual, then a pre-norm 4d MLP with a residual.
/// text_in B x T x d, vision_kv B x (H*W) x d with the encoding already added.
Tensor p2t_layer(const Tensor& text_in, const Tensor& vision_kv, const P2TLayer& layer);

/// V_T + gamma * chain(V_T), the chain attending over V_I + PE.
/// V_I B x C x H x W, V_T B x T x d.
Tensor p2tformer_forward(const Tensor& V_I, const Tensor& V_T, const P2TformerParams& params);

struct T2PHeadParams {
  Linear vision_proj;  // C -> (C/2)*16, then pixel shuffle r=4
  Linear kernel_proj;  // d -> (C/2)*K*K
  Linear bias_proj;    // d -> 1
  std::int64_t K = 3;

  static T2PHeadParams make(std::int64_t C, std::int64_t d, std::int64_t K, Rng& rng);
  std::int64_t channels() const { return kernel_proj.weight.dim(1) / (K * K); }
  void collect(const std::string& prefix, ParamList& out) const;
};

struct AlignmentResponse {
  Tensor O;        // B x T x 4H x 4W
  Tensor O_align;  // B x T x mask_h x mask_w
};

AlignmentResponse t2p_head(const Tensor& V_I, const Tensor& V_T, const T2PHeadParams& params,
                           std::int64_t mask_h, std::int64_t mask_w);

/// Mean over B*T*H*W of (O_align - onehot(M))^2; labels flattened over B x H x W.
Tensor t2p_loss(const Tensor& O_align, const std::vector<int>& labels);

}  // namespace fgaseg
