#pragma once

// Upsampling decoder with local-similarity re-injection, the auxiliary
// logit branch used for class pruning, and top-k selection.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fgaseg/nn.hpp"

namespace fgaseg {

enum class MergeMode { Concat, Add };

std::string merge_mode_name(MergeMode m);
MergeMode parse_merge_mode(const std::string& s);

struct DecoderStage {
  Conv guidance_proj;  // 1x1, 2C -> guidance channels
  Conv merge;          // 1x1, (1 + guidance) -> in channels; add mode only
  Conv conv;           // 3x3
};

struct DecoderParams {
  std::vector<DecoderStage> stages;
  Conv classifier;  // 1x1 -> one logit
  MergeMode merge_mode = MergeMode::Concat;

  /// Stage s (1-based) outputs max(8, d_f >> s) channels.
  static DecoderParams make(std::int64_t d_f, std::int64_t C, std::int64_t n_stages, std::int64_t guidance_channels,
                            MergeMode mode, Rng& rng);
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Categories are folded into the batch so every class shares the weights.
/// Per stage: 2x bilinear upsample, merge with the resized S_l and projected
/// guidance, 3x3 conv, GELU. A 1x1 classifier gives one logit per class,
/// resized to out_h x out_w.
/// F_agg B x T x H x W x d_f, S_l B x T x H x W, guidance two B x C x H x W.
Tensor decode(const Tensor& F_agg, const Tensor& S_l, const std::array<Tensor, 2>& guidance,
              const DecoderParams& params, std::int64_t out_h, std::int64_t out_w);

struct AuxParams {
  Linear proj;  // d_f + 1 -> hidden
  Conv conv;    // 3x3, hidden -> 1

  static AuxParams make(std::int64_t d_f, std::int64_t hidden, Rng& rng);
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Linear over [F, S_l] per (class, pixel), GELU, 3x3 conv to one logit,
/// bilinear resize to out_h x out_w. Result B x T x out_h x out_w.
Tensor aux_branch(const Tensor& F, const Tensor& S_l, const AuxParams& params, std::int64_t out_h,
                  std::int64_t out_w);

/// Mean per-pixel softmax cross-entropy over the class axis.
Tensor aux_loss(const Tensor& Y_auxi, const std::vector<int>& labels);

/// Per image, the k categories with the highest maximum logit over pixels.
/// Ties go to the lower index; each subset is returned in ascending order.
std::vector<std::vector<std::int64_t>> topk_select(const Tensor& Y_auxi, std::int64_t k);

}  // namespace fgaseg
