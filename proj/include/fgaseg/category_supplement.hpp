#pragma once

// Global (cosine) and local (generated depthwise kernel) similarity volumes,
// their fusion into a cost embedding, and class/spatial aggregation.

#include <array>
#include <cstdint>

#include "fgaseg/nn.hpp"

namespace fgaseg {

/// Per-pixel, per-category cosine similarity. V_T_emb B x T x d, V_I B x C x H x W
/// with d == C. Result B x T x H x W in [-1, 1].
Tensor gcs(const Tensor& V_T_emb, const Tensor& V_I);

struct LcsParams {
  Linear W_txt;  // d -> C*K*K
  Linear bias;   // d -> 1
  std::int64_t C = 0;
  std::int64_t K = 3;
  bool kernel_norm = true;

  static LcsParams make(std::int64_t d, std::int64_t C, std::int64_t K, bool kernel_norm, Rng& rng);
  void collect(const std::string& prefix, ParamList& out) const;
};

struct LcsKernels {
  Tensor weights;  // B x T x C x K x K
  Tensor bias;     // B x T
};

/// Projects text to C*K*K values per category, rearranges them to C x K x K
/// (entry c*K*K + i*K + j lands at [c, i, j]) and, with kernel_norm on,
/// applies a softmax over all C*K*K entries of each kernel.
LcsKernels lcs_kernels(const Tensor& V_T_emb, const LcsParams& params);

/// depthwise_conv2d(V_I, kernels) + bias, same padding. Result B x T x H x W.
Tensor lcs(const Tensor& V_I, const LcsKernels& kernels);

struct FusionParams {
  Linear proj;  // 2 -> d_f

  static FusionParams make(std::int64_t d_f, Rng& rng);
  void collect(const std::string& prefix, ParamList& out) const;
};

/// GELU(Linear([S_g, S_l])) per (b, t, h, w). Result B x T x H x W x d_f.
Tensor fuse_pseudo_masks(const Tensor& S_g, const Tensor& S_l, const FusionParams& params);

struct ClassAggLayer {
  LayerNorm norm;
  Attention attn;  // query in: d_f + d, key/value in: d_f
  LayerNorm norm_mlp;
  Mlp mlp;

  void collect(const std::string& prefix, ParamList& out) const;
};

struct ClassAggregationParams {
  std::vector<ClassAggLayer> layers;

  static ClassAggregationParams make(std::int64_t d_f, std::int64_t d, std::int64_t heads, Rng& rng,
                                     std::int64_t n_layers = 2);
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Attention along T at every pixel. Queries combine the normalized cost
/// vector with the category's text guidance; no encoding on the class axis.
/// F B x T x H x W x d_f, text_guidance B x T x d.
Tensor class_aggregation(const Tensor& F, const Tensor& text_guidance, const ClassAggregationParams& params);

struct SpatialAggregationParams {
  Linear guidance_proj;  // 2C -> d_f
  LayerNorm norm;
  Attention attn;  // tokens of width 2 d_f -> d_f
  LayerNorm norm_mlp;
  Mlp mlp;
  std::int64_t window = 4;

  static SpatialAggregationParams make(std::int64_t d_f, std::int64_t C, std::int64_t heads, std::int64_t window,
                                       Rng& rng);
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Non-shifted windowed self-attention over H x W, separately per category.
/// Each token is [LN(F), projected guidance]. Grids that are not a multiple
/// of the window are zero padded and the result cropped.
/// guidance: two B x C x H x W tensors.
Tensor spatial_aggregation(const Tensor& F, const std::array<Tensor, 2>& guidance,
                           const SpatialAggregationParams& params);

}  // namespace fgaseg
