#include <algorithm>
#include <cmath>

#include "fgaseg/ops.hpp"

namespace fgaseg {

namespace {

template <class T>
T* gptr(const Tensor& t) {
  auto& n = t.raw();
  n.ensure_grad();
  return n.grad.data<T>();
}

template <class T>
const T* vptr(const Tensor& t) {
  return t.raw().value.data<T>();
}

// Single-plane correlation with zero "same" padding: y += w (*) x.
// The accumulator type A may be wider than T.
template <class T, class A = T>
void corr_plane(const T* x, const T* w, A* y, std::int64_t H, std::int64_t W, std::int64_t K) {
  const std::int64_t p = K / 2;
  for (std::int64_t ky = 0; ky < K; ++ky) {
    const std::int64_t y0 = std::max<std::int64_t>(0, p - ky);
    const std::int64_t y1 = std::min<std::int64_t>(H, H + p - ky);
    for (std::int64_t kx = 0; kx < K; ++kx) {
      const A wv = w[ky * K + kx];
      if (wv == A(0)) continue;
      const std::int64_t x0 = std::max<std::int64_t>(0, p - kx);
      const std::int64_t x1 = std::min<std::int64_t>(W, W + p - kx);
      const std::int64_t shift = kx - p;
      for (std::int64_t oy = y0; oy < y1; ++oy) {
        const T* xr = x + (oy + ky - p) * W + shift;
        A* yr = y + oy * W;
        for (std::int64_t ox = x0; ox < x1; ++ox) yr[ox] += wv * static_cast<A>(xr[ox]);
      }
    }
  }
}

// Dot product with eight independent partial sums so the loop vectorizes.
template <class T>
T dot(const T* a, const T* b, std::int64_t n) {
  T lanes[8] = {};
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int l = 0; l < 8; ++l) lanes[l] += a[i + l] * b[i + l];
  }
  T acc = 0;
  for (; i < n; ++i) acc += a[i] * b[i];
  for (int l = 0; l < 8; ++l) acc += lanes[l];
  return acc;
}

// Adjoint of corr_plane: dx += w^T dy, dw += dy . shifted x.
template <class T>
void corr_plane_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, std::int64_t H, std::int64_t W,
                         std::int64_t K) {
  const std::int64_t p = K / 2;
  for (std::int64_t ky = 0; ky < K; ++ky) {
    const std::int64_t y0 = std::max<std::int64_t>(0, p - ky);
    const std::int64_t y1 = std::min<std::int64_t>(H, H + p - ky);
    for (std::int64_t kx = 0; kx < K; ++kx) {
      const T wv = w[ky * K + kx];
      const std::int64_t x0 = std::max<std::int64_t>(0, p - kx);
      const std::int64_t x1 = std::min<std::int64_t>(W, W + p - kx);
      const std::int64_t shift = kx - p;
      T acc = 0;
      for (std::int64_t oy = y0; oy < y1; ++oy) {
        const std::int64_t row = (oy + ky - p) * W + shift;
        const T* dyr = dy + oy * W;
        if (dx && wv != T(0)) {
          T* dxr = dx + row;
          for (std::int64_t ox = x0; ox < x1; ++ox) dxr[ox] += wv * dyr[ox];
        }
        if (dw) acc += dot(dyr + x0, x + row + x0, x1 - x0);
      }
      if (dw) dw[ky * K + kx] += acc;
    }
  }
}

void check_kernel_size(std::int64_t K, const char* op) {
  if (K % 2 == 0) {
    throw ConfigError(std::string(op) + ": kernel size must be odd, got " + std::to_string(K));
  }
}

Tensor same_dtype(const Tensor& t, DType dt) { return t.defined() ? t.to(dt) : t; }

DType common_dtype(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts) {
    if (t->defined() && t->dtype() == DType::F64) return DType::F64;
  }
  return DType::F32;
}

}  // namespace

Tensor conv2d(const Tensor& input0, const Tensor& weight0, const Tensor& bias0) {
  const DType dt = common_dtype({&input0, &weight0, &bias0});
  const Tensor input = input0.to(dt), weight = weight0.to(dt), bias = same_dtype(bias0, dt);
  if (input.rank() != 4 || weight.rank() != 4) throw DimensionError("conv2d: expected 4-d input and weight");
  const std::int64_t N = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::int64_t Cout = weight.dim(0), K = weight.dim(2);
  check_kernel_size(K, "conv2d");
  if (weight.dim(1) != Cin || weight.dim(3) != K) {
    throw DimensionError("conv2d: weight " + shape_str(weight.shape()) + " does not match input " +
                         shape_str(input.shape()));
  }
  if (bias.defined() && bias.numel() != Cout) throw DimensionError("conv2d: bias must have Cout entries");
  Tensor out = Tensor::make_result({N, Cout, H, W}, dt, "conv2d");
  const std::int64_t plane = H * W;
  dispatch(dt, [&]<class T>() {
    const T* px = vptr<T>(input);
    const T* pw = vptr<T>(weight);
    T* po = out.raw().value.data<T>();
    for (std::int64_t n = 0; n < N; ++n) {
      for (std::int64_t co = 0; co < Cout; ++co) {
        T* y = po + (n * Cout + co) * plane;
        if (bias.defined()) std::fill(y, y + plane, vptr<T>(bias)[co]);
        for (std::int64_t ci = 0; ci < Cin; ++ci) {
          corr_plane(px + (n * Cin + ci) * plane, pw + (co * Cin + ci) * K * K, y, H, W, K);
        }
      }
    }
  });
  std::vector<Tensor> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  attach_backward(out, inputs, [input, weight, bias, N, Cin, Cout, H, W, K, plane](detail::Node& o) {
    dispatch(input.dtype(), [&]<class T>() {
      const T* go = o.grad.data<T>();
      const T* px = vptr<T>(input);
      const T* pw = vptr<T>(weight);
      T* gx = input.requires_grad() ? gptr<T>(input) : nullptr;
      T* gw = weight.requires_grad() ? gptr<T>(weight) : nullptr;
      T* gb = (bias.defined() && bias.requires_grad()) ? gptr<T>(bias) : nullptr;
      for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t co = 0; co < Cout; ++co) {
          const T* dy = go + (n * Cout + co) * plane;
          if (gb) {
            T s = 0;
            for (std::int64_t i = 0; i < plane; ++i) s += dy[i];
            gb[co] += s;
          }
          for (std::int64_t ci = 0; ci < Cin; ++ci) {
            corr_plane_backward(px + (n * Cin + ci) * plane, pw + (co * Cin + ci) * K * K, dy,
                                gx ? gx + (n * Cin + ci) * plane : nullptr,
                                gw ? gw + (co * Cin + ci) * K * K : nullptr, H, W, K);
          }
        }
      }
    });
  });
  check_finite(out, "conv2d");
  return out;
}

namespace {

struct DynShapes {
  std::int64_t B, Cin, H, W, T, K;
};

DynShapes check_dyn(const Tensor& input, const Tensor& kernels, const Tensor& bias, const char* op) {
  if (input.rank() != 4 || kernels.rank() != 5) {
    throw DimensionError(std::string(op) + ": expected input B x C x H x W and kernels B x T x C x K x K, got " +
                         shape_str(input.shape()) + " and " + shape_str(kernels.shape()));
  }
  DynShapes s{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernels.dim(1), kernels.dim(3)};
  check_kernel_size(s.K, op);
  if (kernels.dim(4) != s.K) throw ConfigError(std::string(op) + ": kernels must be square");
  if (kernels.dim(0) != s.B || kernels.dim(2) != s.Cin) {
    throw DimensionError(std::string(op) + ": kernel channels/batch " + shape_str(kernels.shape()) +
                         " do not match input " + shape_str(input.shape()));
  }
  if (bias.defined() && (bias.rank() != 2 || bias.dim(0) != s.B || bias.dim(1) != s.T)) {
    throw DimensionError(std::string(op) + ": bias must be B x T, got " + shape_str(bias.shape()));
  }
  return s;
}

}  // namespace

Tensor dyn_conv2d(const Tensor& input0, const Tensor& kernels0, const Tensor& bias0) {
  const DType dt = common_dtype({&input0, &kernels0, &bias0});
  const Tensor input = input0.to(dt), kernels = kernels0.to(dt), bias = same_dtype(bias0, dt);
  const auto s = check_dyn(input, kernels, bias, "dyn_conv2d");
  Tensor out = Tensor::make_result({s.B, s.T, s.H, s.W}, dt, "dyn_conv2d");
  const std::int64_t plane = s.H * s.W, kk = s.K * s.K;
  dispatch(dt, [&]<class T>() {
    const T* px = vptr<T>(input);
    const T* pk = vptr<T>(kernels);
    T* po = out.raw().value.data<T>();
    // Sums over C*K*K taps run in double; long f32 chains drift by ~1e-6.
    std::vector<double> acc(static_cast<std::size_t>(plane));
    for (std::int64_t b = 0; b < s.B; ++b) {
      for (std::int64_t t = 0; t < s.T; ++t) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::int64_t c = 0; c < s.Cin; ++c) {
          corr_plane(px + (b * s.Cin + c) * plane, pk + ((b * s.T + t) * s.Cin + c) * kk, acc.data(), s.H, s.W,
                     s.K);
        }
        if (bias.defined()) {
          const double bv = vptr<T>(bias)[b * s.T + t];
          for (std::int64_t i = 0; i < plane; ++i) acc[static_cast<std::size_t>(i)] += bv;
        }
        T* y = po + (b * s.T + t) * plane;
        for (std::int64_t i = 0; i < plane; ++i) y[i] = static_cast<T>(acc[static_cast<std::size_t>(i)]);
      }
    }
  });
  std::vector<Tensor> inputs{input, kernels};
  if (bias.defined()) inputs.push_back(bias);
  attach_backward(out, inputs, [input, kernels, bias, s, plane, kk](detail::Node& o) {
    dispatch(input.dtype(), [&]<class T>() {
      const T* go = o.grad.data<T>();
      const T* px = vptr<T>(input);
      const T* pk = vptr<T>(kernels);
      T* gx = input.requires_grad() ? gptr<T>(input) : nullptr;
      T* gk = kernels.requires_grad() ? gptr<T>(kernels) : nullptr;
      T* gb = (bias.defined() && bias.requires_grad()) ? gptr<T>(bias) : nullptr;
      for (std::int64_t b = 0; b < s.B; ++b) {
        for (std::int64_t t = 0; t < s.T; ++t) {
          const T* dy = go + (b * s.T + t) * plane;
          if (gb) {
            T acc = 0;
            for (std::int64_t i = 0; i < plane; ++i) acc += dy[i];
            gb[b * s.T + t] += acc;
          }
          for (std::int64_t c = 0; c < s.Cin; ++c) {
            const std::int64_t ko = ((b * s.T + t) * s.Cin + c) * kk;
            corr_plane_backward(px + (b * s.Cin + c) * plane, pk + ko, dy,
                                gx ? gx + (b * s.Cin + c) * plane : nullptr, gk ? gk + ko : nullptr, s.H, s.W,
                                s.K);
          }
        }
      }
    });
  });
  check_finite(out, "dyn_conv2d");
  return out;
}

Tensor depthwise_conv2d(const Tensor& input0, const Tensor& kernels0, const Tensor& bias0) {
  const DType dt = common_dtype({&input0, &kernels0, &bias0});
  const Tensor input = input0.to(dt), kernels = kernels0.to(dt), bias = same_dtype(bias0, dt);
  const auto s = check_dyn(input, kernels, bias, "depthwise_conv2d");
  Tensor out = Tensor::make_result({s.B, s.T, s.H, s.W}, dt, "depthwise_conv2d");
  const std::int64_t plane = s.H * s.W, kk = s.K * s.K;
  dispatch(dt, [&]<class T>() {
    const T* px = vptr<T>(input);
    const T* pk = vptr<T>(kernels);
    T* po = out.raw().value.data<T>();
    // Grouped stage: one response plane per (category, channel), in double.
    std::vector<double> responses(static_cast<std::size_t>(s.Cin * plane));
    std::vector<double> acc(static_cast<std::size_t>(plane));
    for (std::int64_t b = 0; b < s.B; ++b) {
      for (std::int64_t t = 0; t < s.T; ++t) {
        std::fill(responses.begin(), responses.end(), 0.0);
        for (std::int64_t c = 0; c < s.Cin; ++c) {
          corr_plane(px + (b * s.Cin + c) * plane, pk + ((b * s.T + t) * s.Cin + c) * kk,
                     responses.data() + c * plane, s.H, s.W, s.K);
        }
        // Reduction stage over channels, then bias.
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::int64_t c = 0; c < s.Cin; ++c) {
          const double* r = responses.data() + c * plane;
          for (std::int64_t i = 0; i < plane; ++i) acc[static_cast<std::size_t>(i)] += r[i];
        }
        if (bias.defined()) {
          const double bv = vptr<T>(bias)[b * s.T + t];
          for (std::int64_t i = 0; i < plane; ++i) acc[static_cast<std::size_t>(i)] += bv;
        }
        T* y = po + (b * s.T + t) * plane;
        for (std::int64_t i = 0; i < plane; ++i) y[i] = static_cast<T>(acc[static_cast<std::size_t>(i)]);
      }
    }
  });
  std::vector<Tensor> inputs{input, kernels};
  if (bias.defined()) inputs.push_back(bias);
  attach_backward(out, inputs, [input, kernels, bias, s, plane, kk](detail::Node& o) {
    dispatch(input.dtype(), [&]<class T>() {
      const T* go = o.grad.data<T>();
      const T* px = vptr<T>(input);
      const T* pk = vptr<T>(kernels);
      T* gx = input.requires_grad() ? gptr<T>(input) : nullptr;
      T* gk = kernels.requires_grad() ? gptr<T>(kernels) : nullptr;
      T* gb = (bias.defined() && bias.requires_grad()) ? gptr<T>(bias) : nullptr;
      for (std::int64_t b = 0; b < s.B; ++b) {
        for (std::int64_t t = 0; t < s.T; ++t) {
          // The channel reduction passes dy unchanged to every response plane.
          const T* dy = go + (b * s.T + t) * plane;
          if (gb) {
            T acc = 0;
            for (std::int64_t i = 0; i < plane; ++i) acc += dy[i];
            gb[b * s.T + t] += acc;
          }
          for (std::int64_t c = 0; c < s.Cin; ++c) {
            const std::int64_t ko = ((b * s.T + t) * s.Cin + c) * kk;
            corr_plane_backward(px + (b * s.Cin + c) * plane, pk + ko, dy,
                                gx ? gx + (b * s.Cin + c) * plane : nullptr, gk ? gk + ko : nullptr, s.H, s.W,
                                s.K);
          }
        }
      }
    });
  });
  check_finite(out, "depthwise_conv2d");
  return out;
}

namespace {

struct Taps {
  std::vector<std::int64_t> i0, i1;
  std::vector<double> frac;
};

// align_corners = false source coordinates, clamped at the borders.
Taps bilinear_taps(std::int64_t in, std::int64_t out) {
  Taps t;
  t.i0.resize(static_cast<std::size_t>(out));
  t.i1.resize(static_cast<std::size_t>(out));
  t.frac.resize(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    const auto u = static_cast<std::size_t>(o);
    t.i0[u] = i0;
    t.i1[u] = i1;
    t.frac[u] = src - static_cast<double>(i0);
  }
  return t;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
  if (out_h < 1 || out_w < 1) throw DimensionError("bilinear_resize: output size must be >= 1");
  if (x.rank() < 2) throw DimensionError("bilinear_resize: input needs rank >= 2");
  const std::int64_t H = x.dim(-2), W = x.dim(-1);
  if (H == out_h && W == out_w) return x;
  const std::int64_t planes = x.numel() / (H * W);
  Shape os = x.shape();
  os[os.size() - 2] = out_h;
  os[os.size() - 1] = out_w;
  Tensor out = Tensor::make_result(os, x.dtype(), "bilinear_resize");
  auto ty = std::make_shared<Taps>(bilinear_taps(H, out_h));
  auto tx = std::make_shared<Taps>(bilinear_taps(W, out_w));
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = vptr<T>(x);
    T* po = out.raw().value.data<T>();
    for (std::int64_t p = 0; p < planes; ++p) {
      const T* src = px + p * H * W;
      T* dst = po + p * out_h * out_w;
      for (std::int64_t oy = 0; oy < out_h; ++oy) {
        const auto uy = static_cast<std::size_t>(oy);
        const T fy = static_cast<T>(ty->frac[uy]);
        const T* r0 = src + ty->i0[uy] * W;
        const T* r1 = src + ty->i1[uy] * W;
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
          const auto ux = static_cast<std::size_t>(ox);
          const T fx = static_cast<T>(tx->frac[ux]);
          const auto a = tx->i0[ux], b = tx->i1[ux];
          const T top = r0[a] + fx * (r0[b] - r0[a]);
          const T bot = r1[a] + fx * (r1[b] - r1[a]);
          dst[oy * out_w + ox] = top + fy * (bot - top);
        }
      }
    }
  });
  attach_backward(out, {x}, [x, ty, tx, planes, H, W, out_h, out_w](detail::Node& o) {
    dispatch(x.dtype(), [&]<class T>() {
      const T* go = o.grad.data<T>();
      T* gx = gptr<T>(x);
      for (std::int64_t p = 0; p < planes; ++p) {
        T* dst = gx + p * H * W;
        const T* g = go + p * out_h * out_w;
        for (std::int64_t oy = 0; oy < out_h; ++oy) {
          const auto uy = static_cast<std::size_t>(oy);
          const T fy = static_cast<T>(ty->frac[uy]);
          T* r0 = dst + ty->i0[uy] * W;
          T* r1 = dst + ty->i1[uy] * W;
          for (std::int64_t ox = 0; ox < out_w; ++ox) {
            const auto ux = static_cast<std::size_t>(ox);
            const T fx = static_cast<T>(tx->frac[ux]);
            const auto a = tx->i0[ux], b = tx->i1[ux];
            const T gv = g[oy * out_w + ox];
            r0[a] += gv * (1 - fy) * (1 - fx);
            r0[b] += gv * (1 - fy) * fx;
            r1[a] += gv * fy * (1 - fx);
            r1[b] += gv * fy * fx;
          }
        }
      }
    });
  });
  check_finite(out, "bilinear_resize");
  return out;
}

Tensor pixel_shuffle(const Tensor& x, std::int64_t r) {
  if (r < 1) throw DimensionError("pixel_shuffle: factor must be >= 1");
  if (x.rank() < 3) throw DimensionError("pixel_shuffle: input needs rank >= 3");
  if (r == 1) return x;
  const std::int64_t C = x.dim(-3), H = x.dim(-2), W = x.dim(-1);
  if (C % (r * r) != 0) {
    throw DimensionError("pixel_shuffle: channels " + std::to_string(C) + " not divisible by " + std::to_string(r * r));
  }
  const Shape lead(x.shape().begin(), x.shape().end() - 3);
  const std::int64_t L = shape_numel(lead);
  const std::int64_t c = C / (r * r);
  Tensor t = reshape(x, {L, c, r, r, H, W});
  t = permute(t, {0, 1, 4, 2, 5, 3});
  Shape os = lead;
  os.insert(os.end(), {c, H * r, W * r});
  return reshape(t, os);
}

Tensor pixel_unshuffle(const Tensor& x, std::int64_t r) {
  if (r < 1) throw DimensionError("pixel_unshuffle: factor must be >= 1");
  if (x.rank() < 3) throw DimensionError("pixel_unshuffle: input needs rank >= 3");
  if (r == 1) return x;
  const std::int64_t C = x.dim(-3), H = x.dim(-2), W = x.dim(-1);
  if (H % r != 0 || W % r != 0) throw DimensionError("pixel_unshuffle: spatial size not divisible by factor");
  const Shape lead(x.shape().begin(), x.shape().end() - 3);
  const std::int64_t L = shape_numel(lead);
  Tensor t = reshape(x, {L, C, H / r, r, W / r, r});
  t = permute(t, {0, 1, 3, 5, 2, 4});
  Shape os = lead;
  os.insert(os.end(), {C * r * r, H / r, W / r});
  return reshape(t, os);
}

}  // namespace fgaseg
