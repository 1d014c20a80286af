#pragma once

// The full segmentation network: frozen toy encoders followed by every
// trainable module, and the inference entry point.

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "fgaseg/category_supplement.hpp"
#include "fgaseg/decoder.hpp"
#include "fgaseg/pixel_alignment.hpp"
#include "fgaseg/toy_vlm.hpp"

namespace fgaseg {

struct ModelConfig {
  ToyVlmConfig vlm;
  std::uint64_t init_seed = 1;
  std::int64_t p2t_layers = 1;
  std::int64_t p2t_heads = 4;
  bool gamma_trainable = true;
  double gamma = 0.1;
  std::int64_t t2p_kernel = 3;
  std::int64_t kernel_size = 3;  // LCS kernel
  bool kernel_norm = true;
  std::int64_t d_f = 16;
  std::int64_t agg_heads = 2;
  std::int64_t window = 4;
  std::int64_t decoder_stages = 3;
  std::int64_t guidance_channels = 4;
  std::int64_t aux_hidden = 8;
  MergeMode merge_mode = MergeMode::Concat;

  void validate() const;
};

struct Model {
  ModelConfig cfg;
  ToyVlm vlm;
  P2TformerParams p2t;
  T2PHeadParams t2p;
  LcsParams lcs;
  FusionParams fusion;
  ClassAggregationParams class_agg;
  SpatialAggregationParams spatial_agg;
  DecoderParams decoder;
  AuxParams aux;

  static Model make(const ModelConfig& cfg);
  /// Trainable tensors in a fixed order with hierarchical names.
  ParamList parameters() const;
};

/// Everything up to (but excluding) the decoder.
struct Features {
  VisionFeatures vision;
  Tensor V_T;
  Tensor V_T_emb;
  Tensor S_g;
  Tensor S_l;
  Tensor F;
  Tensor F_agg;
};

Features compute_features(const Model& m, const Tensor& images, const std::vector<std::int64_t>& ids);

struct ForwardResult {
  Features feats;
  AlignmentResponse align;
  Tensor Y;
  Tensor Y_auxi;
};

/// Training-mode forward pass with logits at out_h x out_w.
ForwardResult forward(const Model& m, const Tensor& images, const std::vector<std::int64_t>& ids, std::int64_t out_h,
                      std::int64_t out_w);

struct InferResult {
  std::vector<int> labels;                    // B x H_img x W_img vocabulary indices
  std::vector<std::vector<std::int64_t>> kept;  // retained categories per image
};

/// Per-pixel argmax label map. With top_k set, the auxiliary branch picks the
/// categories per image and only those are decoded.
InferResult infer(const Model& m, const Tensor& images, const std::vector<std::int64_t>& ids,
                  std::optional<std::int64_t> top_k = std::nullopt);

}  // namespace fgaseg
