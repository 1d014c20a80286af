#pragma once

// Small parameterized layers shared by the trainable modules. Every layer
// owns its tensors through handles, so copying a layer aliases its weights.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fgaseg/grad_check.hpp"
#include "fgaseg/ops.hpp"

namespace fgaseg {

using Rng = std::mt19937_64;
using ParamList = std::vector<NamedTensor>;

/// Trainable tensor with N(0, stddev^2) entries.
Tensor normal_param(const Shape& shape, double stddev, Rng& rng);
/// Trainable tensor filled with `value`.
Tensor const_param(const Shape& shape, double value);

/// Sets every listed tensor to zero in place.
void zero_params(const ParamList& params);
/// Copies values between two parameter lists with identical names and shapes.
void copy_params(const ParamList& dst, const ParamList& src);

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // out, or undefined

  static Linear make(std::int64_t in, std::int64_t out, Rng& rng, bool with_bias = true, double gain = 1.0);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  void collect(const std::string& prefix, ParamList& out) const;
};

struct LayerNorm {
  Tensor weight;
  Tensor bias;

  static LayerNorm make(std::int64_t dim);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, weight, bias); }
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Static 2-d convolution over N x C x H x W.
struct Conv {
  Tensor weight;  // Cout x Cin x K x K
  Tensor bias;    // Cout

  static Conv make(std::int64_t cin, std::int64_t cout, std::int64_t k, Rng& rng);
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias); }
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Two-layer perceptron with GELU.
struct Mlp {
  Linear fc1;
  Linear fc2;

  static Mlp make(std::int64_t dim, std::int64_t hidden, Rng& rng);
  Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Multi-head attention. Queries (..., Lq, dq) attend over keys/values
/// (..., Lk, dkv); scores are scaled by 1/sqrt(dim/heads).
struct Attention {
  Linear q;
  Linear k;
  Linear v;
  Linear o;
  std::int64_t heads = 1;

  static Attention make(std::int64_t dq, std::int64_t dkv, std::int64_t dim, std::int64_t heads, Rng& rng);
  Tensor operator()(const Tensor& query, const Tensor& kv) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace fgaseg
