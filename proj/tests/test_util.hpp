#pragma once

// Shared helpers and brute-force oracles for the test suites. Oracles work on
// plain std::vector<double> and never call into the library's ops.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "fgaseg/nn.hpp"
#include "fgaseg/tensor.hpp"

namespace fgaseg::testing {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            DType dt = default_dtype()) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_values(shape, v, dt);
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  return max_abs_diff(a.to_vector(), b.to_vector());
}

// Sliding-window cross-correlation with zero padding K/2, one output plane
// per (b, t): out[b,t,y,x] = bias[b,t] + sum_c sum_ky sum_kx k[b,t,c,ky,kx] * in[b,c,y+ky-p,x+kx-p].
inline std::vector<double> correlation_oracle(const std::vector<double>& in, const std::vector<double>& k,
                                              const std::vector<double>& bias, int B, int C, int H, int W,
                                              int T, int K) {
  std::vector<double> out(static_cast<std::size_t>(B * T * H * W), 0.0);
  const int p = K / 2;
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(b * T + t)];
          for (int c = 0; c < C; ++c)
            for (int ky = 0; ky < K; ++ky)
              for (int kx = 0; kx < K; ++kx) {
                const int iy = y + ky - p, ix = x + kx - p;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += k[static_cast<std::size_t>((((b * T + t) * C + c) * K + ky) * K + kx)] *
                       in[static_cast<std::size_t>(((b * C + c) * H + iy) * W + ix)];
              }
          out[static_cast<std::size_t>(((b * T + t) * H + y) * W + x)] = acc;
        }
  return out;
}

// Bilinear sample with half-pixel centers; coordinates below zero clamp to
// the first row/column, above the last index clamp to the last.
inline std::vector<double> bilinear_oracle(const std::vector<double>& in, int planes, int H, int W, int OH,
                                           int OW) {
  std::vector<double> out(static_cast<std::size_t>(planes * OH * OW));
  auto coord = [](int o, int n_in, int n_out) {
    double s = (o + 0.5) * static_cast<double>(n_in) / n_out - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(n_in - 1));
  };
  for (int p = 0; p < planes; ++p)
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox) {
        const double sy = coord(oy, H, OH), sx = coord(ox, W, OW);
        const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
        const int y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
        const double wy = sy - y0, wx = sx - x0;
        auto at = [&](int y, int x) { return in[static_cast<std::size_t>((p * H + y) * W + x)]; };
        out[static_cast<std::size_t>((p * OH + oy) * OW + ox)] =
            (1 - wy) * (1 - wx) * at(y0, x0) + (1 - wy) * wx * at(y0, x1) + wy * (1 - wx) * at(y1, x0) +
            wy * wx * at(y1, x1);
      }
  return out;
}

inline std::vector<double> softmax_oracle(const std::vector<double>& v) {
  double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> e(v.size());
  double s = 0;
  for (std::size_t i = 0; i < v.size(); ++i) s += (e[i] = std::exp(v[i] - mx));
  for (auto& x : e) x /= s;
  return e;
}

inline double cosine_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::max(std::sqrt(na), 1e-8) * std::max(std::sqrt(nb), 1e-8));
}

// -(1/N) sum_i log( e^{S_ii/tau} / (sum_j e^{S_ij/tau} + sum_j e^{S_ji/tau}) ), S row-major N x N.
inline double contrastive_oracle(const std::vector<double>& S, int N, double tau) {
  double total = 0;
  for (int i = 0; i < N; ++i) {
    double den = 0;
    for (int j = 0; j < N; ++j) den += std::exp(S[static_cast<std::size_t>(i * N + j)] / tau);
    for (int j = 0; j < N; ++j) den += std::exp(S[static_cast<std::size_t>(j * N + i)] / tau);
    total += std::log(std::exp(S[static_cast<std::size_t>(i * N + i)] / tau) / den);
  }
  return -total / N;
}

// Mean softmax cross-entropy; logits laid out B x T x P.
inline double cross_entropy_oracle(const std::vector<double>& logits, const std::vector<int>& labels, int B,
                                   int T, int P) {
  double total = 0;
  for (int b = 0; b < B; ++b)
    for (int p = 0; p < P; ++p) {
      double s = 0;
      for (int t = 0; t < T; ++t) s += std::exp(logits[static_cast<std::size_t>((b * T + t) * P + p)]);
      const int l = labels[static_cast<std::size_t>(b * P + p)];
      total += -std::log(std::exp(logits[static_cast<std::size_t>((b * T + l) * P + p)]) / s);
    }
  return total / (B * P);
}

// Mean of (pred - onehot(labels))^2 over B x T x P.
inline double onehot_mse_oracle(const std::vector<double>& pred, const std::vector<int>& labels, int B, int T,
                                int P) {
  double total = 0;
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t)
      for (int p = 0; p < P; ++p) {
        const double target = labels[static_cast<std::size_t>(b * P + p)] == t ? 1.0 : 0.0;
        const double d = pred[static_cast<std::size_t>((b * T + t) * P + p)] - target;
        total += d * d;
      }
  return total / (B * T * P);
}

// Mean IoU over classes that appear in either map.
inline double miou_oracle(const std::vector<int>& pred, const std::vector<int>& gt, int T) {
  double total = 0;
  int counted = 0;
  for (int t = 0; t < T; ++t) {
    int inter = 0, uni = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const bool a = pred[i] == t, b = gt[i] == t;
      inter += a && b;
      uni += a || b;
    }
    if (uni == 0) continue;
    total += static_cast<double>(inter) / uni;
    ++counted;
  }
  return counted ? total / counted : 0.0;
}

// Row-major matrix helpers for composed-op oracles. x is rows x in, w is
// in x out (library layout), b has `out` entries or is empty.
inline std::vector<double> linear_oracle(const std::vector<double>& x, const std::vector<double>& w,
                                         const std::vector<double>& b, int rows, int in, int out) {
  std::vector<double> y(static_cast<std::size_t>(rows * out));
  for (int r = 0; r < rows; ++r)
    for (int o = 0; o < out; ++o) {
      double acc = b.empty() ? 0.0 : b[static_cast<std::size_t>(o)];
      for (int i = 0; i < in; ++i)
        acc += x[static_cast<std::size_t>(r * in + i)] * w[static_cast<std::size_t>(i * out + o)];
      y[static_cast<std::size_t>(r * out + o)] = acc;
    }
  return y;
}

inline std::vector<double> layer_norm_oracle(const std::vector<double>& x, const std::vector<double>& g,
                                             const std::vector<double>& b, int rows, int d, double eps = 1e-5) {
  std::vector<double> y(x.size());
  for (int r = 0; r < rows; ++r) {
    double mu = 0, var = 0;
    for (int j = 0; j < d; ++j) mu += x[static_cast<std::size_t>(r * d + j)];
    mu /= d;
    for (int j = 0; j < d; ++j) {
      const double c = x[static_cast<std::size_t>(r * d + j)] - mu;
      var += c * c;
    }
    var /= d;
    for (int j = 0; j < d; ++j) {
      const auto i = static_cast<std::size_t>(r * d + j);
      y[i] = (x[i] - mu) / std::sqrt(var + eps) * g[static_cast<std::size_t>(j)] + b[static_cast<std::size_t>(j)];
    }
  }
  return y;
}

inline std::vector<double> gelu_oracle(std::vector<double> x) {
  for (auto& v : x) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  return x;
}

inline std::vector<double> add_oracle(std::vector<double> a, const std::vector<double>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

// Weights of one multi-head attention block as plain vectors.
struct AttentionWeights {
  std::vector<double> wq, bq, wk, bk, wv, bv, wo, bo;
  int dq = 0, dkv = 0, dim = 0, heads = 1;
};

// Multi-head attention for one sequence pair: q is lq x dq, kv is lk x dkv.
inline std::vector<double> attention_oracle(const std::vector<double>& q, const std::vector<double>& kv, int lq,
                                            int lk, const AttentionWeights& a) {
  const int dh = a.dim / a.heads;
  const auto Q = linear_oracle(q, a.wq, a.bq, lq, a.dq, a.dim);
  const auto K = linear_oracle(kv, a.wk, a.bk, lk, a.dkv, a.dim);
  const auto V = linear_oracle(kv, a.wv, a.bv, lk, a.dkv, a.dim);
  std::vector<double> ctx(static_cast<std::size_t>(lq * a.dim), 0.0);
  for (int h = 0; h < a.heads; ++h)
    for (int i = 0; i < lq; ++i) {
      std::vector<double> s(static_cast<std::size_t>(lk));
      for (int j = 0; j < lk; ++j) {
        double acc = 0;
        for (int c = 0; c < dh; ++c)
          acc += Q[static_cast<std::size_t>(i * a.dim + h * dh + c)] * K[static_cast<std::size_t>(j * a.dim + h * dh + c)];
        s[static_cast<std::size_t>(j)] = acc / std::sqrt(static_cast<double>(dh));
      }
      const auto p = softmax_oracle(s);
      for (int j = 0; j < lk; ++j)
        for (int c = 0; c < dh; ++c)
          ctx[static_cast<std::size_t>(i * a.dim + h * dh + c)] +=
              p[static_cast<std::size_t>(j)] * V[static_cast<std::size_t>(j * a.dim + h * dh + c)];
    }
  return linear_oracle(ctx, a.wo, a.bo, lq, a.dim, a.dim);
}

inline std::vector<double> values_or_empty(const Tensor& t) { return t.defined() ? t.to_vector() : std::vector<double>{}; }

inline AttentionWeights attention_weights(const Attention& a) {
  AttentionWeights w;
  w.wq = a.q.weight.to_vector();
  w.bq = values_or_empty(a.q.bias);
  w.wk = a.k.weight.to_vector();
  w.bk = values_or_empty(a.k.bias);
  w.wv = a.v.weight.to_vector();
  w.bv = values_or_empty(a.v.bias);
  w.wo = a.o.weight.to_vector();
  w.bo = values_or_empty(a.o.bias);
  w.dq = static_cast<int>(a.q.weight.dim(0));
  w.dkv = static_cast<int>(a.k.weight.dim(0));
  w.dim = static_cast<int>(a.q.weight.dim(1));
  w.heads = static_cast<int>(a.heads);
  return w;
}

inline std::vector<double> linear_oracle(const std::vector<double>& x, const Linear& l, int rows) {
  return linear_oracle(x, l.weight.to_vector(), values_or_empty(l.bias), rows, static_cast<int>(l.weight.dim(0)),
                       static_cast<int>(l.weight.dim(1)));
}

inline std::vector<double> layer_norm_oracle(const std::vector<double>& x, const LayerNorm& ln, int rows) {
  return layer_norm_oracle(x, ln.weight.to_vector(), ln.bias.to_vector(), rows, static_cast<int>(ln.weight.numel()));
}

// fc2(gelu(fc1(x))) per row.
inline std::vector<double> mlp_oracle(const std::vector<double>& x, const Mlp& m, int rows) {
  return linear_oracle(gelu_oracle(linear_oracle(x, m.fc1, rows)), m.fc2, rows);
}

}  // namespace fgaseg::testing
