#include "fgaseg/decoder.hpp"

#include <algorithm>
#include <numeric>

namespace fgaseg {

std::string merge_mode_name(MergeMode m) { return m == MergeMode::Concat ? "cat" : "add"; }

MergeMode parse_merge_mode(const std::string& s) {
  if (s == "cat" || s == "concat") return MergeMode::Concat;
  if (s == "add") return MergeMode::Add;
  throw ConfigError("unknown merge mode '" + s + "' (expected cat or add)");
}

namespace {

std::int64_t stage_channels(std::int64_t d_f, std::int64_t s) { return std::max<std::int64_t>(8, d_f >> s); }

// (B, X, h, w) -> (B*T, X, h, w) by repeating each image's planes per class.
Tensor repeat_classes(const Tensor& x, std::int64_t T) {
  const std::int64_t B = x.dim(0), X = x.dim(1), h = x.dim(2), w = x.dim(3);
  return reshape(broadcast_to(reshape(x, {B, 1, X, h, w}), {B, T, X, h, w}), {B * T, X, h, w});
}

}  // namespace

DecoderParams DecoderParams::make(std::int64_t d_f, std::int64_t C, std::int64_t n_stages,
                                  std::int64_t guidance_channels, MergeMode mode, Rng& rng) {
  if (n_stages < 1) throw ConfigError("decoder: stage count must be >= 1");
  DecoderParams p;
  p.merge_mode = mode;
  std::int64_t cin = d_f;
  for (std::int64_t s = 1; s <= n_stages; ++s) {
    const std::int64_t cout = stage_channels(d_f, s);
    DecoderStage st;
    st.guidance_proj = Conv::make(2 * C, guidance_channels, 1, rng);
    if (mode == MergeMode::Concat) {
      st.conv = Conv::make(cin + 1 + guidance_channels, cout, 3, rng);
    } else {
      st.merge = Conv::make(1 + guidance_channels, cin, 1, rng);
      st.conv = Conv::make(cin, cout, 3, rng);
    }
    p.stages.push_back(std::move(st));
    cin = cout;
  }
  p.classifier = Conv::make(cin, 1, 1, rng);
  return p;
}

void DecoderParams::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string sp = prefix + ".stage" + std::to_string(i);
    stages[i].guidance_proj.collect(sp + ".guidance_proj", out);
    if (stages[i].merge.weight.defined()) stages[i].merge.collect(sp + ".merge", out);
    stages[i].conv.collect(sp + ".conv", out);
  }
  classifier.collect(prefix + ".classifier", out);
}

Tensor decode(const Tensor& F_agg, const Tensor& S_l, const std::array<Tensor, 2>& guidance,
              const DecoderParams& params, std::int64_t out_h, std::int64_t out_w) {
  if (F_agg.rank() != 5 || S_l.rank() != 4 || S_l.dim(0) != F_agg.dim(0) || S_l.dim(1) != F_agg.dim(1)) {
    throw DimensionError("decode: F " + shape_str(F_agg.shape()) + " and S_l " + shape_str(S_l.shape()) +
                         " are inconsistent");
  }
  const std::int64_t B = F_agg.dim(0), T = F_agg.dim(1), H = F_agg.dim(2), W = F_agg.dim(3), df = F_agg.dim(4);
  Tensor x = reshape(permute(F_agg, {0, 1, 4, 2, 3}), {B * T, df, H, W});
  Tensor s_l = reshape(S_l, {B * T, 1, H, W});
  Tensor g = concat({guidance[0], guidance[1]}, 1);
  std::int64_t h = H, w = W;
  for (const auto& st : params.stages) {
    h *= 2;
    w *= 2;
    x = bilinear_resize(x, h, w);
    Tensor side = concat({bilinear_resize(s_l, h, w), repeat_classes(bilinear_resize(st.guidance_proj(g), h, w), T)}, 1);
    if (params.merge_mode == MergeMode::Concat) {
      x = st.conv(concat({x, side}, 1));
    } else {
      x = st.conv(add(x, st.merge(side)));
    }
    x = gelu(x);
  }
  Tensor y = bilinear_resize(params.classifier(x), out_h, out_w);
  return reshape(y, {B, T, out_h, out_w});
}

AuxParams AuxParams::make(std::int64_t d_f, std::int64_t hidden, Rng& rng) {
  return {Linear::make(d_f + 1, hidden, rng), Conv::make(hidden, 1, 3, rng)};
}

void AuxParams::collect(const std::string& prefix, ParamList& out) const {
  proj.collect(prefix + ".proj", out);
  conv.collect(prefix + ".conv", out);
}

Tensor aux_branch(const Tensor& F, const Tensor& S_l, const AuxParams& params, std::int64_t out_h,
                  std::int64_t out_w) {
  if (F.rank() != 5 || S_l.rank() != 4 || F.dim(0) != S_l.dim(0) || F.dim(1) != S_l.dim(1)) {
    throw DimensionError("aux_branch: F " + shape_str(F.shape()) + " and S_l " + shape_str(S_l.shape()) +
                         " are inconsistent");
  }
  const std::int64_t B = F.dim(0), T = F.dim(1), H = F.dim(2), W = F.dim(3);
  Tensor x = concat({F, reshape(S_l, {B, T, H, W, 1})}, -1);
  x = gelu(params.proj(x));
  const std::int64_t hidden = x.dim(4);
  x = reshape(permute(x, {0, 1, 4, 2, 3}), {B * T, hidden, H, W});
  Tensor y = bilinear_resize(params.conv(x), out_h, out_w);
  return reshape(y, {B, T, out_h, out_w});
}

Tensor aux_loss(const Tensor& Y_auxi, const std::vector<int>& labels) { return cross_entropy(Y_auxi, labels); }

std::vector<std::vector<std::int64_t>> topk_select(const Tensor& Y_auxi, std::int64_t k) {
  if (Y_auxi.rank() < 2) throw DimensionError("topk_select: expected B x T x ...");
  const std::int64_t B = Y_auxi.dim(0), T = Y_auxi.dim(1);
  if (k < 1 || k > T) {
    throw ConfigError("topk_select: k=" + std::to_string(k) + " outside [1, " + std::to_string(T) + "]");
  }
  const std::int64_t inner = Y_auxi.numel() / (B * T);
  const std::vector<double> v = Y_auxi.to_vector();
  std::vector<std::vector<std::int64_t>> out;
  for (std::int64_t b = 0; b < B; ++b) {
    std::vector<double> score(static_cast<std::size_t>(T));
    for (std::int64_t t = 0; t < T; ++t) {
      const auto first = v.begin() + (b * T + t) * inner;
      score[static_cast<std::size_t>(t)] = *std::max_element(first, first + inner);
    }
    std::vector<std::int64_t> idx(static_cast<std::size_t>(T));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::int64_t a, std::int64_t c) {
      return score[static_cast<std::size_t>(a)] > score[static_cast<std::size_t>(c)];
    });
    idx.resize(static_cast<std::size_t>(k));
    std::sort(idx.begin(), idx.end());
    out.push_back(std::move(idx));
  }
  return out;
}

}  // namespace fgaseg
