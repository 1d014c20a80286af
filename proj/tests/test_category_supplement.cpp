#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "fgaseg/category_supplement.hpp"
#include "fgaseg/grad_check.hpp"
#include "test_util.hpp"

using namespace fgaseg;
using namespace fgaseg::testing;

namespace {

double kernel_sum(const Tensor& w, std::int64_t kernel, std::int64_t size) {
  double s = 0;
  for (std::int64_t i = 0; i < size; ++i) s += w.at(kernel * size + i);
  return s;
}

// Channel vector at (b, y, x) of a B x C x H x W tensor.
std::vector<double> pixel_vec(const Tensor& t, int b, int y, int x) {
  const int C = static_cast<int>(t.dim(1)), H = static_cast<int>(t.dim(2)), W = static_cast<int>(t.dim(3));
  std::vector<double> v(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) v[static_cast<std::size_t>(c)] = t.at(((b * C + c) * H + y) * W + x);
  return v;
}

}  // namespace

TEST_CASE("gcs: matching vector, scale invariance, bounds") {
  std::vector<double> cat{0.2, -0.5, 0.9};
  Tensor V_T = Tensor::from_values({1, 2, 3}, {0.2, -0.5, 0.9, 1.0, 0.0, 0.0});
  Tensor V_I = Tensor::from_values({1, 3, 1, 2}, {0.2, 0.0, -0.5, 1.0, 0.9, 0.0});
  Tensor s = gcs(V_T, V_I);
  CHECK(s.shape() == Shape{1, 2, 1, 2});
  CHECK(s.at({0, 0, 0, 0}) == doctest::Approx(1.0).epsilon(1e-6));

  std::mt19937_64 g(1);
  Tensor a = random_tensor({2, 4, 6}, g);
  Tensor b = random_tensor({2, 6, 3, 3}, g);
  Tensor base = gcs(a, b);
  CHECK(max_abs_diff(base, gcs(scale(a, 2.5), scale(b, 0.3))) <= 1e-6);
  for (double v : base.to_vector()) CHECK(std::abs(v) <= 1 + 1e-6);
  CHECK_THROWS_AS(gcs(random_tensor({1, 2, 5}, g), b), DimensionError);
}

TEST_CASE("gcs: 1x2x1x1 against the scalar cosine") {
  std::mt19937_64 g(2);
  Tensor V_T = random_tensor({1, 2, 4}, g);
  Tensor V_I = random_tensor({1, 4, 1, 1}, g);
  Tensor s = gcs(V_T, V_I);
  const auto tv = V_T.to_vector();
  for (int t = 0; t < 2; ++t) {
    std::vector<double> row(tv.begin() + t * 4, tv.begin() + t * 4 + 4);
    CHECK(std::abs(s.at(t) - cosine_oracle(row, V_I.to_vector())) <= 1e-6);
  }
}

TEST_CASE("lcs_kernels: normalized kernels are positive and sum to one") {
  Rng rng(3);
  for (std::int64_t K : {1, 3, 5}) {
    LcsParams p = LcsParams::make(8, 4, K, true, rng);
    std::mt19937_64 g(4);
    LcsKernels k = lcs_kernels(random_tensor({2, 3, 8}, g, -3, 3), p);
    CHECK(k.weights.shape() == Shape{2, 3, 4, K, K});
    CHECK(k.bias.shape() == Shape{2, 3});
    for (int i = 0; i < 6; ++i) CHECK(std::abs(kernel_sum(k.weights, i, 4 * K * K) - 1.0) <= 1e-6);
    for (double v : k.weights.to_vector()) CHECK(v > 0.0);
  }
}

TEST_CASE("lcs_kernels: zero projection gives uniform kernels") {
  Rng rng(5);
  LcsParams p = LcsParams::make(8, 2, 3, true, rng);
  ParamList ps;
  p.W_txt.collect("w", ps);
  zero_params(ps);
  std::mt19937_64 g(6);
  for (double v : lcs_kernels(random_tensor({1, 2, 8}, g), p).weights.to_vector()) {
    CHECK(v == doctest::Approx(1.0 / 18).epsilon(1e-6));
  }
}

TEST_CASE("lcs_kernels: K=3, C=2 rearrangement follows the index map") {
  Rng rng(7);
  LcsParams p = LcsParams::make(4, 2, 3, false, rng);
  ParamList ps;
  p.W_txt.collect("w", ps);
  zero_params(ps);
  for (int i = 0; i < 18; ++i) p.W_txt.bias.set(i, i);
  LcsKernels k = lcs_kernels(Tensor::zeros({1, 1, 4}), p);
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) CHECK(k.weights.at({0, 0, c, i, j}) == c * 9 + i * 3 + j);
}

TEST_CASE("lcs_kernels: without normalization kernels do not sum to one") {
  Rng rng(8);
  LcsParams p = LcsParams::make(8, 4, 3, false, rng);
  std::mt19937_64 g(9);
  LcsKernels k = lcs_kernels(random_tensor({1, 4, 8}, g), p);
  int off = 0;
  for (int i = 0; i < 4; ++i) off += std::abs(kernel_sum(k.weights, i, 36) - 1.0) > 1e-3;
  CHECK(off == 4);
}

TEST_CASE("lcs: constant input gives value plus bias in the interior") {
  Rng rng(10);
  LcsParams p = LcsParams::make(8, 3, 3, true, rng);
  std::mt19937_64 g(11);
  LcsKernels k = lcs_kernels(random_tensor({1, 2, 8}, g), p);
  Tensor s = lcs(Tensor::full({1, 3, 6, 6}, 0.37), k);
  for (int t = 0; t < 2; ++t)
    for (int y = 1; y < 5; ++y)
      for (int x = 1; x < 5; ++x)
        CHECK(s.at({0, t, y, x}) == doctest::Approx(0.37 + k.bias.at(t)).epsilon(1e-6));
}

TEST_CASE("lcs: K=1 is a per-pixel weighted channel sum") {
  std::mt19937_64 g(12);
  Tensor V_I = random_tensor({1, 3, 4, 4}, g);
  Tensor w = random_tensor({1, 2, 3, 1, 1}, g);
  Tensor b = random_tensor({1, 2}, g);
  Tensor s = lcs(V_I, {w, b});
  for (int t = 0; t < 2; ++t)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) {
        const auto v = pixel_vec(V_I, 0, y, x);
        double ref = b.at(t);
        for (int c = 0; c < 3; ++c) ref += w.at(t * 3 + c) * v[static_cast<std::size_t>(c)];
        CHECK(std::abs(s.at({0, t, y, x}) - ref) <= 1e-6);
      }
}

TEST_CASE("lcs: 4x4 against brute-force correlation, channel mismatch") {
  Rng rng(13);
  LcsParams p = LcsParams::make(8, 3, 3, true, rng);
  std::mt19937_64 g(14);
  Tensor V_I = random_tensor({2, 3, 4, 4}, g);
  LcsKernels k = lcs_kernels(random_tensor({2, 2, 8}, g), p);
  const auto ref = correlation_oracle(V_I.to_vector(), k.weights.to_vector(), k.bias.to_vector(), 2, 3, 4, 4, 2, 3);
  CHECK(max_abs_diff(lcs(V_I, k).to_vector(), ref) <= 1e-6);
  CHECK_THROWS_AS(lcs(random_tensor({2, 4, 4, 4}, g), k), DimensionError);
}

TEST_CASE("fuse_pseudo_masks: zero weights, asymmetry, affine oracle") {
  Rng rng(15);
  FusionParams f = FusionParams::make(16, rng);
  std::mt19937_64 g(16);
  Tensor S_g = random_tensor({1, 2, 3, 3}, g);
  Tensor S_l = random_tensor({1, 2, 3, 3}, g);
  Tensor F = fuse_pseudo_masks(S_g, S_l, f);
  CHECK(F.shape() == Shape{1, 2, 3, 3, 16});
  CHECK(max_abs_diff(fuse_pseudo_masks(S_l, S_g, f), F) > 1e-3);

  Tensor a = Tensor::from_values({1, 1, 1, 1}, {0.4});
  Tensor b = Tensor::from_values({1, 1, 1, 1}, {-0.9});
  const auto ref = gelu_oracle(linear_oracle({0.4, -0.9}, f.proj, 1));
  CHECK(max_abs_diff(fuse_pseudo_masks(a, b, f).to_vector(), ref) <= 1e-6);

  // Equal input columns make the map symmetric in (S_g, S_l).
  for (int o = 0; o < 16; ++o) f.proj.weight.set(16 + o, f.proj.weight.at(o));
  CHECK(max_abs_diff(fuse_pseudo_masks(S_l, S_g, f), fuse_pseudo_masks(S_g, S_l, f)) <= 1e-7);

  ParamList ps;
  ps.push_back({"w", f.proj.weight});
  zero_params(ps);
  const auto bias = gelu_oracle(f.proj.bias.to_vector());
  const auto out = fuse_pseudo_masks(S_g, S_l, f).to_vector();
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(std::abs(out[i] - bias[i % 16]) <= 1e-7);
  CHECK_THROWS_AS(fuse_pseudo_masks(S_g, random_tensor({1, 2, 3, 2}, g), f), DimensionError);
}

TEST_CASE("class_aggregation: a single class reduces to the value path") {
  Rng rng(17);
  const int df = 16, d = 8, HW = 4;
  ClassAggregationParams p = ClassAggregationParams::make(df, d, 2, rng);
  std::mt19937_64 g(18);
  Tensor F = random_tensor({1, 1, 2, 2, df}, g);
  Tensor guide = random_tensor({1, 1, d}, g);
  Tensor out = class_aggregation(F, guide, p);
  CHECK(out.shape() == F.shape());

  auto x = F.to_vector();
  for (const auto& l : p.layers) {
    const auto n = layer_norm_oracle(x, l.norm, HW);
    // One key: attention returns o(v(n)) whatever the query.
    const auto att = linear_oracle(linear_oracle(n, l.attn.v, HW), l.attn.o, HW);
    x = add_oracle(x, att);
    x = add_oracle(x, mlp_oracle(layer_norm_oracle(x, l.norm_mlp, HW), l.mlp, HW));
  }
  CHECK(max_abs_diff(out.to_vector(), x) <= 1e-5);
}

TEST_CASE("class_aggregation: multi-class oracle at one pixel") {
  Rng rng(19);
  const int df = 8, d = 4, T = 3;
  ClassAggregationParams p = ClassAggregationParams::make(df, d, 2, rng, 1);
  std::mt19937_64 g(20);
  Tensor F = random_tensor({1, T, 1, 1, df}, g);
  Tensor guide = random_tensor({1, T, d}, g);
  const auto& l = p.layers[0];
  auto x = F.to_vector();
  const auto n = layer_norm_oracle(x, l.norm, T);
  const auto gv = guide.to_vector();
  std::vector<double> q;
  for (int t = 0; t < T; ++t) {
    q.insert(q.end(), n.begin() + t * df, n.begin() + (t + 1) * df);
    q.insert(q.end(), gv.begin() + t * d, gv.begin() + (t + 1) * d);
  }
  x = add_oracle(x, attention_oracle(q, n, T, T, attention_weights(l.attn)));
  x = add_oracle(x, mlp_oracle(layer_norm_oracle(x, l.norm_mlp, T), l.mlp, T));
  CHECK(max_abs_diff(class_aggregation(F, guide, p).to_vector(), x) <= 1e-5);
}

TEST_CASE("class_aggregation: permutation equivariance and zero-weight identity") {
  Rng rng(21);
  ClassAggregationParams p = ClassAggregationParams::make(8, 4, 2, rng);
  std::mt19937_64 g(22);
  Tensor F = random_tensor({2, 4, 2, 3, 8}, g);
  Tensor guide = random_tensor({2, 4, 4}, g);
  Tensor out = class_aggregation(F, guide, p);
  const std::vector<std::int64_t> perm{3, 1, 0, 2};
  Tensor pout = class_aggregation(index_select(F, 1, perm), index_select(guide, 1, perm), p);
  CHECK(max_abs_diff(pout.to_vector(), index_select(out, 1, perm).to_vector()) <= 1e-6);

  ParamList ps;
  for (auto& l : p.layers) {
    l.attn.collect("a", ps);
    l.mlp.collect("m", ps);
  }
  zero_params(ps);
  CHECK(class_aggregation(F, guide, p).to_vector() == F.to_vector());
}

TEST_CASE("spatial_aggregation: a 4x4 grid is one window of full attention") {
  Rng rng(23);
  const int df = 8, C = 4, N = 16;
  SpatialAggregationParams p = SpatialAggregationParams::make(df, C, 2, 4, rng);
  std::mt19937_64 g(24);
  Tensor F = random_tensor({1, 2, 4, 4, df}, g);
  std::array<Tensor, 2> guid{random_tensor({1, C, 4, 4}, g), random_tensor({1, C, 4, 4}, g)};
  Tensor out = spatial_aggregation(F, guid, p);

  std::vector<double> gcat;
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      const auto a = pixel_vec(guid[0], 0, y, x), b = pixel_vec(guid[1], 0, y, x);
      gcat.insert(gcat.end(), a.begin(), a.end());
      gcat.insert(gcat.end(), b.begin(), b.end());
    }
  const auto gp = linear_oracle(gcat, p.guidance_proj, N);
  const auto fv = F.to_vector();
  std::vector<double> ref;
  for (int t = 0; t < 2; ++t) {
    std::vector<double> f(fv.begin() + t * N * df, fv.begin() + (t + 1) * N * df);
    const auto n = layer_norm_oracle(f, p.norm, N);
    std::vector<double> tok;
    for (int i = 0; i < N; ++i) {
      tok.insert(tok.end(), n.begin() + i * df, n.begin() + (i + 1) * df);
      tok.insert(tok.end(), gp.begin() + i * df, gp.begin() + (i + 1) * df);
    }
    auto x = add_oracle(f, attention_oracle(tok, tok, N, N, attention_weights(p.attn)));
    x = add_oracle(x, mlp_oracle(layer_norm_oracle(x, p.norm_mlp, N), p.mlp, N));
    ref.insert(ref.end(), x.begin(), x.end());
  }
  CHECK(max_abs_diff(out.to_vector(), ref) <= 1e-5);
}

TEST_CASE("spatial_aggregation: zero weights, locality, padding") {
  Rng rng(25);
  SpatialAggregationParams p = SpatialAggregationParams::make(8, 4, 2, 4, rng);
  std::mt19937_64 g(26);
  Tensor F = random_tensor({1, 2, 4, 8, 8}, g);
  std::array<Tensor, 2> guid{random_tensor({1, 4, 4, 8}, g), random_tensor({1, 4, 4, 8}, g)};
  Tensor out = spatial_aggregation(F, guid, p);

  // Windows are columns 0-3 and 4-7; nudge one cell of the left window.
  Tensor F2 = F.clone();
  F2.set(((0 * 4 + 1) * 8 + 2) * 8 + 5, 3.0);
  Tensor out2 = spatial_aggregation(F2, guid, p);
  bool right_same = true, left_changed = false;
  for (int t = 0; t < 2; ++t)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 8; ++x)
        for (int c = 0; c < 8; ++c) {
          const auto i = (((t * 4 + y) * 8 + x) * 8) + c;
          const bool same = out.at(i) == out2.at(i);
          if (x >= 4) right_same &= same;
          if (x < 4 && t == 0 && !(y == 1 && x == 2)) left_changed |= !same;
        }
  CHECK(right_same);
  CHECK(left_changed);

  std::array<Tensor, 2> g5{random_tensor({1, 4, 5, 6}, g), random_tensor({1, 4, 5, 6}, g)};
  Tensor F5 = random_tensor({1, 2, 5, 6, 8}, g);
  CHECK(spatial_aggregation(F5, g5, p).shape() == F5.shape());

  ParamList ps;
  p.attn.collect("a", ps);
  p.mlp.collect("m", ps);
  zero_params(ps);
  CHECK(spatial_aggregation(F, guid, p).to_vector() == F.to_vector());
  CHECK(spatial_aggregation(F5, g5, p).to_vector() == F5.to_vector());
}

TEST_CASE("grad_check: supplementation and aggregation parameters") {
  Rng rng(27);
  const int C = 4, d = 4, df = 8;
  LcsParams lp = LcsParams::make(d, C, 3, true, rng);
  FusionParams fp = FusionParams::make(df, rng);
  ClassAggregationParams cp = ClassAggregationParams::make(df, d, 2, rng, 1);
  SpatialAggregationParams sp = SpatialAggregationParams::make(df, C, 2, 2, rng);
  ParamList params;
  lp.collect("lcs", params);
  fp.collect("fusion", params);
  cp.collect("class_agg", params);
  sp.collect("spatial_agg", params);

  std::mt19937_64 g(28);
  Tensor V_I = random_tensor({1, C, 3, 3}, g);
  Tensor V_T = random_tensor({1, 2, d}, g);
  Tensor g0 = random_tensor({1, C, 3, 3}, g), g1 = random_tensor({1, C, 3, 3}, g);
  Tensor target = random_tensor({1, 2, 3, 3, df}, g);
  auto loss = [&] {
    const DType dt = default_dtype();
    Tensor vi = V_I.to(dt), vt = V_T.to(dt);
    Tensor F = fuse_pseudo_masks(gcs(vt, vi), lcs(vi, lcs_kernels(vt, lp)), fp);
    F = spatial_aggregation(class_aggregation(F, vt, cp), {g0.to(dt), g1.to(dt)}, sp);
    return mean(mul(F, target.to(dt)));
  };
  GradReport rep = grad_check(loss, params);
  CHECK(rep.failure.empty());
  CHECK(rep.max_rel_error <= 1e-3);
  CHECK(rep.pass);
  CHECK(rep.params.size() == params.size());
}
