#pragma once

#include <cstdint>
#include <vector>

#include "fgaseg/tensor.hpp"

namespace fgaseg {

// Elementwise arithmetic with numpy-style broadcasting. Mixed F32/F64
// inputs are promoted to F64.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor neg(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double s, const Tensor& x) { return scale(x, s); }

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor square(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor transpose(const Tensor& x, int a, int b);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length);
Tensor index_select(const Tensor& x, int axis, const std::vector<std::int64_t>& indices);
/// Zero padding along one axis.
Tensor pad(const Tensor& x, int axis, std::int64_t before, std::int64_t after);
Tensor broadcast_to(const Tensor& x, const Shape& shape);

/// Batched matrix product over the last two axes; leading axes broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[..., in] * weight[in, out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);
/// Normalizes the last axis (eps 1e-5 inside the sqrt); weight/bias optional.
Tensor layer_norm(const Tensor& x, const Tensor& weight, const Tensor& bias, double eps = 1e-5);
/// x / max(||x||, eps) along the last axis.
Tensor l2_normalize(const Tensor& x, double eps = 1e-8);
/// Cosine of the angle between last-axis vectors, leading axes broadcast.
Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps = 1e-8);

/// Static-weight cross-correlation, zero "same" padding.
/// input N x Cin x H x W, weight Cout x Cin x K x K, bias Cout (optional).
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias);
/// Per-sample generated kernels: input B x Cin x H x W, kernels B x T x Cin x K x K,
/// bias B x T. Output B x T x H x W.
Tensor dyn_conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias);
/// Same contract as dyn_conv2d, evaluated as per-channel correlations that
/// are then reduced over channels.
Tensor depthwise_conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias);
/// Bilinear resampling of the last two axes, align_corners = false.
Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w);
/// (..., C*r*r, H, W) -> (..., C, H*r, W*r); out[c, h*r+i, w*r+j] = in[c*r*r + i*r + j, h, w].
Tensor pixel_shuffle(const Tensor& x, std::int64_t r);
/// Inverse of pixel_shuffle.
Tensor pixel_unshuffle(const Tensor& x, std::int64_t r);

/// Mean of squared differences over all elements.
Tensor mse_loss(const Tensor& pred, const Tensor& target);
/// Mean per-position softmax cross-entropy. logits B x T x (spatial...),
/// labels flattened over (B, spatial...), each in [0, T).
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

/// Constant B x T x (spatial) one-hot expansion of integer labels.
Tensor one_hot(const std::vector<int>& labels, std::int64_t batch, std::int64_t classes,
               const Shape& spatial, DType dt = default_dtype());
/// Index of the maximum along axis 1 for a B x T x (spatial...) tensor;
/// ties resolve to the lower index.
std::vector<int> argmax_axis1(const Tensor& x);

}  // namespace fgaseg
