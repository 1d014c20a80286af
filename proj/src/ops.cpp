#include "fgaseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fgaseg {

namespace {

int norm_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw DimensionError(std::string(op) + ": axis out of range for rank " + std::to_string(rank));
  }
  return axis;
}

std::vector<std::int64_t> contiguous_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] = st[static_cast<std::size_t>(i) + 1] * s[static_cast<std::size_t>(i) + 1];
  }
  return st;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` aligned to `out` rank, zero on broadcast axes.
std::vector<std::int64_t> aligned_strides(const Shape& in, const Shape& out) {
  const auto st = contiguous_strides(in);
  std::vector<std::int64_t> res(out.size(), 0);
  const std::size_t off = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    res[i + off] = in[i] == 1 ? 0 : st[i];
  }
  return res;
}

// Calls f(out_index, a_index, b_index) over every element of `out`.
template <class F>
void for_each_bcast(const Shape& out, const std::vector<std::int64_t>& sa,
                    const std::vector<std::int64_t>& sb, F&& f) {
  const std::size_t r = out.size();
  const std::int64_t n = shape_numel(out);
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  const std::int64_t inner = out[r - 1];
  const std::int64_t ia = sa[r - 1], ib = sb[r - 1];
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t base = 0; base < n; base += inner) {
    for (std::int64_t j = 0; j < inner; ++j) f(base + j, oa + j * ia, ob + j * ib);
    for (int d = static_cast<int>(r) - 2; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      ++idx[du];
      oa += sa[du];
      ob += sb[du];
      if (idx[du] < out[du]) break;
      oa -= sa[du] * out[du];
      ob -= sb[du] * out[du];
      idx[du] = 0;
    }
  }
}

Tensor finish(Tensor out, const char* op) {
  check_finite(out, op);
  return out;
}

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

template <class T>
T* vptr_mut(Tensor& t) {
  return t.raw().value.data<T>();
}

std::pair<Tensor, Tensor> promote(const Tensor& a, const Tensor& b) {
  if (a.dtype() == b.dtype()) return {a, b};
  return {a.to(DType::F64), b.to(DType::F64)};
}

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary(const Tensor& a0, const Tensor& b0, BinOp kind, const char* name) {
  auto [a, b] = promote(a0, b0);
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  Tensor out = Tensor::make_result(out_shape, a.dtype(), name);
  const auto sa = aligned_strides(a.shape(), out_shape);
  const auto sb = aligned_strides(b.shape(), out_shape);
  const bool same = a.shape() == b.shape();
  dispatch(a.dtype(), [&]<class T>() {
    const T* pa = vptr<T>(a);
    const T* pb = vptr<T>(b);
    T* po = vptr_mut<T>(out);
    auto apply = [&](std::int64_t o, std::int64_t i, std::int64_t j) {
      switch (kind) {
        case BinOp::Add: po[o] = pa[i] + pb[j]; break;
        case BinOp::Sub: po[o] = pa[i] - pb[j]; break;
        case BinOp::Mul: po[o] = pa[i] * pb[j]; break;
        case BinOp::Div: po[o] = pa[i] / pb[j]; break;
      }
    };
    if (same) {
      const std::int64_t n = out.numel();
      for (std::int64_t i = 0; i < n; ++i) apply(i, i, i);
    } else {
      for_each_bcast(out_shape, sa, sb, apply);
    }
  });
  attach_backward(out, {a, b}, [a, b, kind, out_shape, sa, sb](detail::Node& o) {
    dispatch(a.dtype(), [&]<class T>() {
      const T* go = o.grad.data<T>();
      const T* pa = vptr<T>(a);
      const T* pb = vptr<T>(b);
      T* ga = a.requires_grad() ? gptr<T>(a) : nullptr;
      T* gb = b.requires_grad() ? gptr<T>(b) : nullptr;
      for_each_bcast(out_shape, sa, sb, [&](std::int64_t oi, std::int64_t i, std::int64_t j) {
        const T g = go[oi];
        switch (kind) {
          case BinOp::Add:
            if (ga) ga[i] += g;
            if (gb) gb[j] += g;
            break;
          case BinOp::Sub:
            if (ga) ga[i] += g;
            if (gb) gb[j] -= g;
            break;
          case BinOp::Mul:
            if (ga) ga[i] += g * pb[j];
            if (gb) gb[j] += g * pa[i];
            break;
          case BinOp::Div:
            if (ga) ga[i] += g / pb[j];
            if (gb) gb[j] -= g * pa[i] / (pb[j] * pb[j]);
            break;
        }
      });
    });
  });
  return finish(out, name);
}

// y = f(x), dy/dx = df(x, y).
template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, const char* name, Fwd fwd, Deriv deriv) {
  Tensor out = Tensor::make_result(x.shape(), x.dtype(), name);
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = vptr<T>(x);
    T* po = vptr_mut<T>(out);
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = static_cast<T>(fwd(static_cast<double>(px[i])));
  });
  attach_backward(out, {x}, [x, deriv](detail::Node& o) {
    dispatch(x.dtype(), [&]<class T>() {
      const T* go = o.grad.data<T>();
      const T* px = vptr<T>(x);
      const T* po = o.value.data<T>();
      T* gx = gptr<T>(x);
      const std::int64_t n = x.numel();
      for (std::int64_t i = 0; i < n; ++i) {
        gx[i] += go[i] * static_cast<T>(deriv(static_cast<double>(px[i]), static_cast<double>(po[i])));
      }
    });
  });
  return finish(out, name);
}

struct AxisSplit {
  std::int64_t outer, n, inner;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r{1, s[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Div, "div"); }

Tensor scale(const Tensor& x, double s) {
  return unary(x, "scale", [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(x, "add_scalar", [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor exp(const Tensor& x) {
  return unary(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor tanh(const Tensor& x) {
  return unary(x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid", [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

Tensor square(const Tensor& x) {
  return unary(x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sum(const Tensor& x) {
  Tensor out = Tensor::make_result({1}, x.dtype(), "sum");
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = vptr<T>(x);
    double acc = 0.0;
    for (std::int64_t i = 0; i < x.numel(); ++i) acc += px[i];
    vptr_mut<T>(out)[0] = static_cast<T>(acc);
  });
  attach_backward(out, {x}, [x](detail::Node& o) {
    dispatch(x.dtype(), [&]<class T>() {
      const T g = o.grad.data<T>()[0];
      T* gx = gptr<T>(x);
      for (std::int64_t i = 0; i < x.numel(); ++i) gx[i] += g;
    });
  });
  return finish(out, "sum");
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum(const Tensor& x, int axis, bool keepdim) {
  axis = norm_axis(axis, x.rank(), "sum");
  const auto sp = split_at(x.shape(), axis);
  Shape os = x.shape();
  if (keepdim) {
    os[static_cast<std::size_t>(axis)] = 1;
  } else {
    os.erase(os.begin() + axis);
    if (os.empty()) os = {1};
  }
  Tensor out = Tensor::make_result(os, x.dtype(), "sum_axis");
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = vptr<T>(x);
    T* po = vptr_mut<T>(out);
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t k = 0; k < sp.n; ++k) {
        const T* row = px + (o * sp.n + k) * sp.inner;
        T* dst = po + o * sp.inner;
        for (std::int64_t i = 0; i < sp.inner; ++i) dst[i] += row[i];
      }
    }
  });
  attach_backward(out, {x}, [x, sp](detail::Node& o) {
    dispatch(x.dtype(), [&]<class T>() {
      const T* go = o.grad.data<T>();
      T* gx = gptr<T>(x);
      for (std::int64_t oo = 0; oo < sp.outer; ++oo) {
        for (std::int64_t k = 0; k < sp.n; ++k) {
          T* row = gx + (oo * sp.n + k) * sp.inner;
          const T* src = go + oo * sp.inner;
          for (std::int64_t i = 0; i < sp.inner; ++i) row[i] += src[i];
        }
      }
    });
  });
  return finish(out, "sum_axis");
}

Tensor mean(const Tensor& x, int axis, bool keepdim) {
  const auto n = x.dim(axis);
  return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(n));
}

Tensor reshape(const Tensor& x, Shape shape) {
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw DimensionError("reshape: more than one inferred axis");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0) shape[static_cast<std::size_t>(infer)] = x.numel() / known;
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Tensor out = Tensor::make_result(shape, x.dtype(), "reshape");
  out.raw().value = x.raw().value;
  attach_backward(out, {x}, [x](detail::Node& o) {
    dispatch(x.dtype(), [&]<class T>() {
      const T* go = o.grad.data<T>();
      T* gx = gptr<T>(x);
      for (std::int64_t i = 0; i < x.numel(); ++i) gx[i] += go[i];
    });
  });
  return out;
}

namespace {

// Maps each output flat index to its source flat index under `perm`.
std::vector<std::int64_t> permute_map(const Shape& in, const std::vector<int>& perm, Shape& out_shape) {
  const std::size_t r = in.size();
  const auto st = contiguous_strides(in);
  out_shape.resize(r);
  std::vector<std::int64_t> src_st(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in[static_cast<std::size_t>(perm[i])];
    src_st[i] = st[static_cast<std::size_t>(perm[i])];
  }
  const std::int64_t n = shape_numel(in);
  std::vector<std::int64_t> map(static_cast<std::size_t>(n));
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t src = 0;
  for (std::int64_t o = 0; o < n; ++o) {
    map[static_cast<std::size_t>(o)] = src;
    for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      ++idx[du];
      src += src_st[du];
      if (idx[du] < out_shape[du]) break;
      src -= src_st[du] * out_shape[du];
      idx[du] = 0;
    }
  }
  return map;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) throw DimensionError("permute: rank mismatch");
  std::vector<bool> used(static_cast<std::size_t>(r), false);
  for (int p : perm) {
    if (p < 0 || p >= r || used[static_cast<std::size_t>(p)]) throw DimensionError("permute: invalid permutation");
    used[static_cast<std::size_t>(p)] = true;
  }
  Shape os;
  auto map = std::make_shared<std::vector<std::int64_t>>(permute_map(x.shape(), perm, os));
  Tensor out = Tensor::make_result(os, x.dtype(), "permute");
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = vptr<T>(x);
    T* po = vptr_mut<T>(out);
    for (std::size_t i = 0; i < map->size(); ++i) po[i] = px[(*map)[i]];
  });
  attach_backward(out, {x}, [x, map](detail::Node& o) {
    dispatch(x.dtype(), [&]<class T>() {
      const T* go = o.grad.data<T>();
      T* gx = gptr<T>(x);
      for (std::size_t i = 0; i < map->size(); ++i) gx[(*map)[i]] += go[i];
    });
  });
  return out;
}

Tensor transpose(const Tensor& x, int a, int b) {
  a = norm_axis(a, x.rank(), "transpose");
  b = norm_axis(b, x.rank(), "transpose");
  std::vector<int> perm(static_cast<std::size_t>(x.rank()));
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[static_cast<std::size_t>(a)], perm[static_cast<std::size_t>(b)]);
  return permute(x, perm);
}

Tensor concat(const std::vector<Tensor>& xs0, int axis) {
  if (xs0.empty()) throw DimensionError("concat: no inputs");
  std::vector<Tensor> xs = xs0;
  bool mixed = false;
  for (const auto& t : xs) mixed = mixed || t.dtype() != xs[0].dtype();
  if (mixed) {
    for (auto& t : xs) t = t.to(DType::F64);
  }
  const int r = xs[0].rank();
  axis = norm_axis(axis, r, "concat");
  Shape os = xs[0].shape();
  os[static_cast<std::size_t>(axis)] = 0;
  for (const auto& t : xs) {
    if (t.rank() != r) throw DimensionError("concat: rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != axis && t.dim(i) != xs[0].dim(i)) {
        throw DimensionError("concat: " + shape_str(t.shape()) + " vs " + shape_str(xs[0].shape()));
      }
    }
    os[static_cast<std::size_t>(axis)] += t.dim(axis);
  }
  const auto sp = split_at(os, axis);
  Tensor out = Tensor::make_result(os, xs[0].dtype(), "concat");
  dispatch(out.dtype(), [&]<class T>() {
    T* po = vptr_mut<T>(out);
    std::int64_t off = 0;
    for (const auto& t : xs) {
      const std::int64_t chunk = t.dim(axis) * sp.inner;
      const T* pt = vptr<T>(t);
      for (std::int64_t o = 0; o < sp.outer; ++o) {
        std::copy(pt + o * chunk, pt + (o + 1) * chunk, po + o * sp.n * sp.inner + off);
      }
      off += chunk;
    }
  });
  attach_backward(out, xs, [xs, sp, axis](detail::Node& o) {
    dispatch(o.value.dtype, [&]<class T>() {
      const T* go = o.grad.data<T>();
      std::int64_t off = 0;
      for (const auto& t : xs) {
        const std::int64_t chunk = t.dim(axis) * sp.inner;
        if (t.requires_grad()) {
          T* gt = gptr<T>(t);
          for (std::int64_t oo = 0; oo < sp.outer; ++oo) {
            const T* src = go + oo * sp.n * sp.inner + off;
            T* dst = gt + oo * chunk;
            for (std::int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
          }
        }
        off += chunk;
      }
    });
  });
  return out;
}

Tensor index_select(const Tensor& x, int axis, const std::vector<std::int64_t>& indices) {
  axis = norm_axis(axis, x.rank(), "index_select");
  if (indices.empty()) throw DimensionError("index_select: empty index list");
  const auto sp = split_at(x.shape(), axis);
  for (auto i : indices) {
    if (i < 0 || i >= sp.n) throw DimensionError("index_select: index " + std::to_string(i) + " out of range");
  }
  Shape os = x.shape();
  os[static_cast<std::size_t>(axis)] = static_cast<std::int64_t>(indices.size());
  Tensor out = Tensor::make_result(os, x.dtype(), "index_select");
  const auto m = static_cast<std::int64_t>(indices.size());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = vptr<T>(x);
    T* po = vptr_mut<T>(out);
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t k = 0; k < m; ++k) {
        const T* src = px + (o * sp.n + indices[static_cast<std::size_t>(k)]) * sp.inner;
        std::copy(src, src + sp.inner, po + (o * m + k) * sp.inner);
      }
    }
  });
  attach_backward(out, {x}, [x, sp, indices, m](detail::Node& o) {
    dispatch(x.dtype(), [&]<class T>() {
      const T* go = o.grad.data<T>();
      T* gx = gptr<T>(x);
      for (std::int64_t oo = 0; oo < sp.outer; ++oo) {
        for (std::int64_t k = 0; k < m; ++k) {
          T* dst = gx + (oo * sp.n + indices[static_cast<std::size_t>(k)]) * sp.inner;
          const T* src = go + (oo * m + k) * sp.inner;
          for (std::int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
        }
      }
    });
  });
  return out;
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length) {
  axis = norm_axis(axis, x.rank(), "slice");
  if (start < 0 || length <= 0 || start + length > x.dim(axis)) {
    throw DimensionError("slice: [" + std::to_string(start) + ", +" + std::to_string(length) +
                         ") out of range for " + shape_str(x.shape()));
  }
  std::vector<std::int64_t> idx(static_cast<std::size_t>(length));
  std::iota(idx.begin(), idx.end(), start);
  return index_select(x, axis, idx);
}

Tensor pad(const Tensor& x, int axis, std::int64_t before, std::int64_t after) {
  axis = norm_axis(axis, x.rank(), "pad");
  if (before < 0 || after < 0) throw DimensionError("pad: negative padding");
  if (before == 0 && after == 0) return x;
  std::vector<Tensor> parts;
  Shape zs = x.shape();
  if (before > 0) {
    zs[static_cast<std::size_t>(axis)] = before;
    parts.push_back(Tensor::zeros(zs, x.dtype()));
  }
  parts.push_back(x);
  if (after > 0) {
    zs[static_cast<std::size_t>(axis)] = after;
    parts.push_back(Tensor::zeros(zs, x.dtype()));
  }
  return concat(parts, axis);
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  if (broadcast_shape(x.shape(), shape, "broadcast_to") != shape) {
    throw DimensionError("broadcast_to: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  return add(x, Tensor::zeros(shape, x.dtype()));
}

Tensor matmul(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = promote(a0, b0);
  if (a.rank() < 2 || b.rank() < 2) throw DimensionError("matmul: operands need rank >= 2");
  const std::int64_t m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  if (k != k2) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const Shape ab(a.shape().begin(), a.shape().end() - 2);
  const Shape bb(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  try {
    batch = broadcast_shape(ab, bb, "matmul");
  } catch (const DimensionError&) {
    throw DimensionError("matmul: batch dimensions of " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " do not broadcast");
  }
  Shape os = batch;
  os.push_back(m);
  os.push_back(n);
  Tensor out = Tensor::make_result(os, a.dtype(), "matmul");
  // Batch offsets (in matrices) for each operand.
  auto offsets = std::make_shared<std::vector<std::pair<std::int64_t, std::int64_t>>>();
  {
    const Shape bshape = batch.empty() ? Shape{1} : batch;
    const Shape abs = ab.empty() ? Shape{1} : ab;
    const Shape bbs = bb.empty() ? Shape{1} : bb;
    const auto sa = aligned_strides(abs, bshape);
    const auto sb = aligned_strides(bbs, bshape);
    for_each_bcast(bshape, sa, sb, [&](std::int64_t, std::int64_t i, std::int64_t j) { offsets->emplace_back(i, j); });
  }
  dispatch(a.dtype(), [&]<class T>() {
    const T* pa = vptr<T>(a);
    const T* pb = vptr<T>(b);
    T* po = vptr_mut<T>(out);
    for (std::size_t bi = 0; bi < offsets->size(); ++bi) {
      const T* A = pa + (*offsets)[bi].first * m * k;
      const T* B = pb + (*offsets)[bi].second * k * n;
      T* C = po + static_cast<std::int64_t>(bi) * m * n;
      for (std::int64_t i = 0; i < m; ++i) {
        T* crow = C + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
          const T av = A[i * k + p];
          if (av == T(0)) continue;
          const T* brow = B + p * n;
          for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      }
    }
  });
  attach_backward(out, {a, b}, [a, b, offsets, m, k, n](detail::Node& o) {
    dispatch(a.dtype(), [&]<class T>() {
      const T* go = o.grad.data<T>();
      const T* pa = vptr<T>(a);
      const T* pb = vptr<T>(b);
      T* ga = a.requires_grad() ? gptr<T>(a) : nullptr;
      T* gb = b.requires_grad() ? gptr<T>(b) : nullptr;
      for (std::size_t bi = 0; bi < offsets->size(); ++bi) {
        const T* G = go + static_cast<std::int64_t>(bi) * m * n;
        const T* A = pa + (*offsets)[bi].first * m * k;
        const T* B = pb + (*offsets)[bi].second * k * n;
        if (ga) {
          T* GA = ga + (*offsets)[bi].first * m * k;
          for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t p = 0; p < k; ++p) {
              const T* brow = B + p * n;
              const T* grow = G + i * n;
              T acc = 0;
              for (std::int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              GA[i * k + p] += acc;
            }
          }
        }
        if (gb) {
          T* GB = gb + (*offsets)[bi].second * k * n;
          for (std::int64_t i = 0; i < m; ++i) {
            const T* grow = G + i * n;
            for (std::int64_t p = 0; p < k; ++p) {
              const T av = A[i * k + p];
              T* gbrow = GB + p * n;
              for (std::int64_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
            }
          }
        }
      }
    });
  });
  return finish(out, "matmul");
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || x.dim(-1) != weight.dim(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " with weight " + shape_str(weight.shape()));
  }
  Tensor y = matmul(x, weight);
  if (bias.defined()) y = add(y, bias);
  return y;
}

Tensor softmax(const Tensor& x, int axis) {
  axis = norm_axis(axis, x.rank(), "softmax");
  const auto sp = split_at(x.shape(), axis);
  Tensor out = Tensor::make_result(x.shape(), x.dtype(), "softmax");
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = vptr<T>(x);
    T* po = vptr_mut<T>(out);
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t i = 0; i < sp.inner; ++i) {
        const std::int64_t base = o * sp.n * sp.inner + i;
        T mx = px[base];
        for (std::int64_t k = 1; k < sp.n; ++k) mx = std::max(mx, px[base + k * sp.inner]);
        double s = 0;
        for (std::int64_t k = 0; k < sp.n; ++k) {
          const T e = std::exp(px[base + k * sp.inner] - mx);
          po[base + k * sp.inner] = e;
          s += e;
        }
        // Normalize in double so long rows still sum to 1 within f32 rounding.
        for (std::int64_t k = 0; k < sp.n; ++k) po[base + k * sp.inner] = static_cast<T>(po[base + k * sp.inner] / s);
      }
    }
  });
  attach_backward(out, {x}, [x, sp](detail::Node& o) {
    dispatch(x.dtype(), [&]<class T>() {
      const T* go = o.grad.data<T>();
      const T* y = o.value.data<T>();
      T* gx = gptr<T>(x);
      for (std::int64_t oo = 0; oo < sp.outer; ++oo) {
        for (std::int64_t i = 0; i < sp.inner; ++i) {
          const std::int64_t base = oo * sp.n * sp.inner + i;
          T dot = 0;
          for (std::int64_t k = 0; k < sp.n; ++k) dot += go[base + k * sp.inner] * y[base + k * sp.inner];
          for (std::int64_t k = 0; k < sp.n; ++k) {
            const auto idx = base + k * sp.inner;
            gx[idx] += y[idx] * (go[idx] - dot);
          }
        }
      }
    });
  });
  return finish(out, "softmax");
}

Tensor log_softmax(const Tensor& x, int axis) {
  axis = norm_axis(axis, x.rank(), "log_softmax");
  const auto sp = split_at(x.shape(), axis);
  Tensor out = Tensor::make_result(x.shape(), x.dtype(), "log_softmax");
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = vptr<T>(x);
    T* po = vptr_mut<T>(out);
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t i = 0; i < sp.inner; ++i) {
        const std::int64_t base = o * sp.n * sp.inner + i;
        T mx = px[base];
        for (std::int64_t k = 1; k < sp.n; ++k) mx = std::max(mx, px[base + k * sp.inner]);
        T s = 0;
        for (std::int64_t k = 0; k < sp.n; ++k) s += std::exp(px[base + k * sp.inner] - mx);
        const T lse = mx + std::log(s);
        for (std::int64_t k = 0; k < sp.n; ++k) po[base + k * sp.inner] = px[base + k * sp.inner] - lse;
      }
    }
  });
  attach_backward(out, {x}, [x, sp](detail::Node& o) {
    dispatch(x.dtype(), [&]<class T>() {
      const T* go = o.grad.data<T>();
      const T* y = o.value.data<T>();
      T* gx = gptr<T>(x);
      for (std::int64_t oo = 0; oo < sp.outer; ++oo) {
        for (std::int64_t i = 0; i < sp.inner; ++i) {
          const std::int64_t base = oo * sp.n * sp.inner + i;
          T s = 0;
          for (std::int64_t k = 0; k < sp.n; ++k) s += go[base + k * sp.inner];
          for (std::int64_t k = 0; k < sp.n; ++k) {
            const auto idx = base + k * sp.inner;
            gx[idx] += go[idx] - std::exp(y[idx]) * s;
          }
        }
      }
    });
  });
  return finish(out, "log_softmax");
}

Tensor layer_norm(const Tensor& x0, const Tensor& weight, const Tensor& bias, double eps) {
  Tensor x = x0;
  if ((weight.defined() && weight.dtype() != x.dtype()) || (bias.defined() && bias.dtype() != x.dtype())) {
    x = x.to(DType::F64);
  }
  Tensor w = weight.defined() ? weight.to(x.dtype()) : weight;
  Tensor b = bias.defined() ? bias.to(x.dtype()) : bias;
  const std::int64_t d = x.dim(-1);
  const std::int64_t rows = x.numel() / d;
  if ((w.defined() && w.numel() != d) || (b.defined() && b.numel() != d)) {
    throw DimensionError("layer_norm: affine parameters must have " + std::to_string(d) + " entries");
  }
  Tensor out = Tensor::make_result(x.shape(), x.dtype(), "layer_norm");
  // Cached normalized values and inverse std for backward.
  auto xhat = std::make_shared<detail::Buffer>();
  auto rstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  xhat->resize(x.dtype(), static_cast<std::size_t>(x.numel()));
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = vptr<T>(x);
    T* po = vptr_mut<T>(out);
    T* ph = xhat->data<T>();
    const T* pw = w.defined() ? vptr<T>(w) : nullptr;
    const T* pb = b.defined() ? vptr<T>(b) : nullptr;
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* row = px + r * d;
      double mu = 0;
      for (std::int64_t i = 0; i < d; ++i) mu += row[i];
      mu /= static_cast<double>(d);
      double var = 0;
      for (std::int64_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
      var /= static_cast<double>(d);
      const double rs = 1.0 / std::sqrt(var + eps);
      (*rstd)[static_cast<std::size_t>(r)] = rs;
      for (std::int64_t i = 0; i < d; ++i) {
        const T h = static_cast<T>((row[i] - mu) * rs);
        ph[r * d + i] = h;
        T y = h;
        if (pw) y *= pw[i];
        if (pb) y += pb[i];
        po[r * d + i] = y;
      }
    }
  });
  std::vector<Tensor> inputs{x};
  if (w.defined()) inputs.push_back(w);
  if (b.defined()) inputs.push_back(b);
  attach_backward(out, inputs, [x, w, b, xhat, rstd, d, rows](detail::Node& o) {
    dispatch(x.dtype(), [&]<class T>() {
      const T* go = o.grad.data<T>();
      const T* ph = xhat->data<T>();
      const T* pw = w.defined() ? vptr<T>(w) : nullptr;
      T* gw = (w.defined() && w.requires_grad()) ? gptr<T>(w) : nullptr;
      T* gb = (b.defined() && b.requires_grad()) ? gptr<T>(b) : nullptr;
      T* gx = x.requires_grad() ? gptr<T>(x) : nullptr;
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* g = go + r * d;
        const T* h = ph + r * d;
        double m1 = 0, m2 = 0;
        for (std::int64_t i = 0; i < d; ++i) {
          const double gh = pw ? g[i] * pw[i] : g[i];
          m1 += gh;
          m2 += gh * h[i];
          if (gw) gw[i] += g[i] * h[i];
          if (gb) gb[i] += g[i];
        }
        if (!gx) continue;
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        const double rs = (*rstd)[static_cast<std::size_t>(r)];
        for (std::int64_t i = 0; i < d; ++i) {
          const double gh = pw ? g[i] * pw[i] : g[i];
          gx[r * d + i] += static_cast<T>(rs * (gh - m1 - h[i] * m2));
        }
      }
    });
  });
  return finish(out, "layer_norm");
}

Tensor l2_normalize(const Tensor& x, double eps) {
  const std::int64_t d = x.dim(-1);
  const std::int64_t rows = x.numel() / d;
  Tensor out = Tensor::make_result(x.shape(), x.dtype(), "l2_normalize");
  auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = vptr<T>(x);
    T* po = vptr_mut<T>(out);
    for (std::int64_t r = 0; r < rows; ++r) {
      double s = 0;
      for (std::int64_t i = 0; i < d; ++i) s += static_cast<double>(px[r * d + i]) * px[r * d + i];
      const double nrm = std::sqrt(s);
      (*norms)[static_cast<std::size_t>(r)] = nrm;
      const double den = std::max(nrm, eps);
      for (std::int64_t i = 0; i < d; ++i) po[r * d + i] = static_cast<T>(px[r * d + i] / den);
    }
  });
  attach_backward(out, {x}, [x, norms, d, rows, eps](detail::Node& o) {
    dispatch(x.dtype(), [&]<class T>() {
      const T* go = o.grad.data<T>();
      const T* y = o.value.data<T>();
      T* gx = gptr<T>(x);
      for (std::int64_t r = 0; r < rows; ++r) {
        const double nrm = (*norms)[static_cast<std::size_t>(r)];
        if (nrm > eps) {
          double dot = 0;
          for (std::int64_t i = 0; i < d; ++i) dot += static_cast<double>(go[r * d + i]) * y[r * d + i];
          for (std::int64_t i = 0; i < d; ++i) {
            gx[r * d + i] += static_cast<T>((go[r * d + i] - y[r * d + i] * dot) / nrm);
          }
        } else {
          for (std::int64_t i = 0; i < d; ++i) gx[r * d + i] += static_cast<T>(go[r * d + i] / eps);
        }
      }
    });
  });
  return finish(out, "l2_normalize");
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps) {
  if (a.dim(-1) != b.dim(-1)) {
    throw DimensionError("cosine_similarity: last axes differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  return sum(mul(l2_normalize(a, eps), l2_normalize(b, eps)), -1);
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("mse_loss: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  return mean(square(sub(pred, target)));
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() < 2) throw DimensionError("cross_entropy: logits need rank >= 2");
  const std::int64_t B = logits.dim(0), T = logits.dim(1);
  const std::int64_t inner = logits.numel() / (B * T);
  if (static_cast<std::int64_t>(labels.size()) != B * inner) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
  }
  for (int l : labels) {
    if (l < 0 || l >= T) {
      throw InputError("cross_entropy: label " + std::to_string(l) + " outside [0, " + std::to_string(T) + ")");
    }
  }
  Tensor out = Tensor::make_result({1}, logits.dtype(), "cross_entropy");
  const std::int64_t count = B * inner;
  auto probs = std::make_shared<detail::Buffer>();
  probs->resize(logits.dtype(), static_cast<std::size_t>(logits.numel()));
  dispatch(logits.dtype(), [&]<class E>() {
    const E* px = vptr<E>(logits);
    E* pp = probs->data<E>();
    double total = 0;
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t base = b * T * inner + i;
        E mx = px[base];
        for (std::int64_t t = 1; t < T; ++t) mx = std::max(mx, px[base + t * inner]);
        double s = 0;
        for (std::int64_t t = 0; t < T; ++t) s += std::exp(static_cast<double>(px[base + t * inner] - mx));
        const double lse = static_cast<double>(mx) + std::log(s);
        for (std::int64_t t = 0; t < T; ++t) {
          pp[base + t * inner] = static_cast<E>(std::exp(static_cast<double>(px[base + t * inner]) - lse));
        }
        const int lab = labels[static_cast<std::size_t>(b * inner + i)];
        total += lse - static_cast<double>(px[base + lab * inner]);
      }
    }
    vptr_mut<E>(out)[0] = static_cast<E>(total / static_cast<double>(count));
  });
  attach_backward(out, {logits}, [logits, labels, probs, B, T, inner, count](detail::Node& o) {
    dispatch(logits.dtype(), [&]<class T2>() {
      const T2 g = o.grad.data<T2>()[0] / static_cast<T2>(count);
      const T2* pp = probs->data<T2>();
      T2* gx = gptr<T2>(logits);
      for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t i = 0; i < inner; ++i) {
          const std::int64_t base = b * T * inner + i;
          const int lab = labels[static_cast<std::size_t>(b * inner + i)];
          for (std::int64_t t = 0; t < T; ++t) {
            const T2 target = t == lab ? T2(1) : T2(0);
            gx[base + t * inner] += g * (pp[base + t * inner] - target);
          }
        }
      }
    });
  });
  return finish(out, "cross_entropy");
}

Tensor one_hot(const std::vector<int>& labels, std::int64_t batch, std::int64_t classes, const Shape& spatial,
               DType dt) {
  const std::int64_t inner = shape_numel(spatial);
  if (static_cast<std::int64_t>(labels.size()) != batch * inner) {
    throw DimensionError("one_hot: label count does not match batch x spatial");
  }
  Shape s{batch, classes};
  s.insert(s.end(), spatial.begin(), spatial.end());
  Tensor out = Tensor::zeros(s, dt);
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const int l = labels[static_cast<std::size_t>(b * inner + i)];
      if (l < 0 || l >= classes) {
        throw InputError("one_hot: label " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
      }
      out.set((b * classes + l) * inner + i, 1.0);
    }
  }
  return out;
}

std::vector<int> argmax_axis1(const Tensor& x) {
  const std::int64_t B = x.dim(0), T = x.dim(1);
  const std::int64_t inner = x.numel() / (B * T);
  std::vector<int> out(static_cast<std::size_t>(B * inner));
  dispatch(x.dtype(), [&]<class T2>() {
    const T2* px = vptr<T2>(x);
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t base = b * T * inner + i;
        int best = 0;
        for (std::int64_t t = 1; t < T; ++t) {
          if (px[base + t * inner] > px[base + best * inner]) best = static_cast<int>(t);
        }
        out[static_cast<std::size_t>(b * inner + i)] = best;
      }
    }
  });
  return out;
}

}  // namespace fgaseg
