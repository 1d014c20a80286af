#include "fgaseg/model.hpp"

namespace fgaseg {

void ModelConfig::validate() const {
  vlm.validate();
  if (p2t_layers < 1) throw ConfigError("p2t_layers must be >= 1");
  if (decoder_stages < 1) throw ConfigError("decoder_stages must be >= 1");
  if (kernel_size < 1 || kernel_size % 2 == 0) throw ConfigError("kernel_size must be odd and positive");
  if (t2p_kernel < 1 || t2p_kernel % 2 == 0) throw ConfigError("t2p_kernel must be odd and positive");
  if (vlm.C % p2t_heads != 0) throw ConfigError("C must be divisible by p2t_heads");
  if (d_f % agg_heads != 0) throw ConfigError("d_f must be divisible by agg_heads");
}

Model Model::make(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.init_seed);
  const std::int64_t C = cfg.vlm.C, d = cfg.vlm.d;
  Model m{cfg,
          ToyVlm(cfg.vlm),
          P2TformerParams::make(d, cfg.p2t_layers, cfg.p2t_heads, cfg.gamma, cfg.gamma_trainable, rng),
          T2PHeadParams::make(C, d, cfg.t2p_kernel, rng),
          LcsParams::make(d, C, cfg.kernel_size, cfg.kernel_norm, rng),
          FusionParams::make(cfg.d_f, rng),
          ClassAggregationParams::make(cfg.d_f, d, cfg.agg_heads, rng),
          SpatialAggregationParams::make(cfg.d_f, C, cfg.agg_heads, cfg.window, rng),
          DecoderParams::make(cfg.d_f, C, cfg.decoder_stages, cfg.guidance_channels, cfg.merge_mode, rng),
          AuxParams::make(cfg.d_f, cfg.aux_hidden, rng)};
  return m;
}

ParamList Model::parameters() const {
  ParamList out;
  p2t.collect("p2t", out);
  t2p.collect("t2p", out);
  lcs.collect("lcs", out);
  fusion.collect("fusion", out);
  class_agg.collect("class_agg", out);
  spatial_agg.collect("spatial_agg", out);
  decoder.collect("decoder", out);
  aux.collect("aux", out);
  return out;
}

Features compute_features(const Model& m, const Tensor& images, const std::vector<std::int64_t>& ids) {
  if (ids.empty()) throw InputError("empty vocabulary");
  Features f;
  f.vision = m.vlm.encode_image(images);
  f.V_T = m.vlm.encode_text(ids, images.dim(0)).embeddings;
  f.V_T_emb = p2tformer_forward(f.vision.final, f.V_T, m.p2t);
  f.S_g = gcs(f.V_T_emb, f.vision.final);
  f.S_l = lcs(f.vision.final, lcs_kernels(f.V_T_emb, m.lcs));
  f.F = fuse_pseudo_masks(f.S_g, f.S_l, m.fusion);
  Tensor agg = class_aggregation(f.F, f.V_T_emb, m.class_agg);
  f.F_agg = spatial_aggregation(agg, f.vision.guidance, m.spatial_agg);
  return f;
}

ForwardResult forward(const Model& m, const Tensor& images, const std::vector<std::int64_t>& ids, std::int64_t out_h,
                      std::int64_t out_w) {
  ForwardResult r;
  r.feats = compute_features(m, images, ids);
  r.align = t2p_head(r.feats.vision.final, r.feats.V_T_emb, m.t2p, out_h, out_w);
  r.Y = decode(r.feats.F_agg, r.feats.S_l, r.feats.vision.guidance, m.decoder, out_h, out_w);
  r.Y_auxi = aux_branch(r.feats.F, r.feats.S_l, m.aux, out_h, out_w);
  return r;
}

InferResult infer(const Model& m, const Tensor& images, const std::vector<std::int64_t>& ids,
                  std::optional<std::int64_t> top_k) {
  NoGradGuard no_grad;
  const std::int64_t B = images.dim(0), H = images.dim(2), W = images.dim(3);
  const Features f = compute_features(m, images, ids);
  const auto T = static_cast<std::int64_t>(ids.size());
  InferResult r;
  if (!top_k) {
    r.labels = argmax_axis1(decode(f.F_agg, f.S_l, f.vision.guidance, m.decoder, H, W));
    std::vector<std::int64_t> all(static_cast<std::size_t>(T));
    for (std::int64_t t = 0; t < T; ++t) all[static_cast<std::size_t>(t)] = t;
    r.kept.assign(static_cast<std::size_t>(B), all);
    return r;
  }
  r.kept = topk_select(aux_branch(f.F, f.S_l, m.aux, H, W), *top_k);
  r.labels.reserve(static_cast<std::size_t>(B * H * W));
  for (std::int64_t b = 0; b < B; ++b) {
    const auto& keep = r.kept[static_cast<std::size_t>(b)];
    Tensor Fb = index_select(slice(f.F_agg, 0, b, 1), 1, keep);
    Tensor Sb = index_select(slice(f.S_l, 0, b, 1), 1, keep);
    std::array<Tensor, 2> gb{slice(f.vision.guidance[0], 0, b, 1), slice(f.vision.guidance[1], 0, b, 1)};
    for (int l : argmax_axis1(decode(Fb, Sb, gb, m.decoder, H, W))) {
      r.labels.push_back(static_cast<int>(keep[static_cast<std::size_t>(l)]));
    }
  }
  return r;
}

}  // namespace fgaseg
