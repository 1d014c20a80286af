#include "fgaseg/nn.hpp"

#include <cmath>

namespace fgaseg {

Tensor normal_param(const Shape& shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = dist(rng);
  Tensor t = Tensor::from_values(shape, v, DType::F32);
  t.set_requires_grad(true);
  return t;
}

Tensor const_param(const Shape& shape, double value) {
  Tensor t = Tensor::full(shape, value, DType::F32);
  t.set_requires_grad(true);
  return t;
}

void zero_params(const ParamList& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.copy_from(Tensor::zeros(t.shape(), t.dtype()));
  }
}

void copy_params(const ParamList& dst, const ParamList& src) {
  if (dst.size() != src.size()) throw DimensionError("copy_params: parameter count mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].name != src[i].name || dst[i].tensor.shape() != src[i].tensor.shape()) {
      throw DimensionError("copy_params: mismatch at " + dst[i].name);
    }
    Tensor t = dst[i].tensor;
    t.copy_from(src[i].tensor);
  }
}

Linear Linear::make(std::int64_t in, std::int64_t out, Rng& rng, bool with_bias, double gain) {
  Linear l;
  l.weight = normal_param({in, out}, gain / std::sqrt(static_cast<double>(in)), rng);
  if (with_bias) l.bias = const_param({out}, 0.0);
  return l;
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

LayerNorm LayerNorm::make(std::int64_t dim) { return {const_param({dim}, 1.0), const_param({dim}, 0.0)}; }

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

Conv Conv::make(std::int64_t cin, std::int64_t cout, std::int64_t k, Rng& rng) {
  return {normal_param({cout, cin, k, k}, 1.0 / std::sqrt(static_cast<double>(cin * k * k)), rng),
          const_param({cout}, 0.0)};
}

void Conv::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

Mlp Mlp::make(std::int64_t dim, std::int64_t hidden, Rng& rng) {
  Mlp m;
  m.fc1 = Linear::make(dim, hidden, rng);
  m.fc2 = Linear::make(hidden, dim, rng);
  return m;
}

void Mlp::collect(const std::string& prefix, ParamList& out) const {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

Attention Attention::make(std::int64_t dq, std::int64_t dkv, std::int64_t dim, std::int64_t heads, Rng& rng) {
  if (heads < 1 || dim % heads != 0) {
    throw ConfigError("attention: dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
  }
  Attention a;
  a.q = Linear::make(dq, dim, rng);
  a.k = Linear::make(dkv, dim, rng);
  a.v = Linear::make(dkv, dim, rng);
  a.o = Linear::make(dim, dim, rng);
  a.heads = heads;
  return a;
}

Tensor Attention::operator()(const Tensor& query, const Tensor& kv) const {
  if (query.rank() < 2 || kv.rank() != query.rank()) {
    throw DimensionError("attention: query " + shape_str(query.shape()) + " and kv " + shape_str(kv.shape()) +
                         " need equal rank >= 2");
  }
  const Shape lead(query.shape().begin(), query.shape().end() - 2);
  const std::int64_t n = shape_numel(lead);
  const std::int64_t lq = query.dim(-2), lk = kv.dim(-2);
  const std::int64_t dim = q.weight.dim(1), dh = dim / heads;

  auto split = [&](const Tensor& x, std::int64_t len) {
    return permute(reshape(x, {n, len, heads, dh}), {0, 2, 1, 3});
  };
  Tensor qh = split(q(query), lq);
  Tensor kh = split(k(kv), lk);
  Tensor vh = split(v(kv), lk);
  Tensor scores = scale(matmul(qh, transpose(kh, 2, 3)), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor ctx = matmul(softmax(scores, -1), vh);
  Tensor merged = reshape(permute(ctx, {0, 2, 1, 3}), {n, lq, dim});
  Shape os = lead;
  os.push_back(lq);
  os.push_back(dim);
  return reshape(o(merged), os);
}

void Attention::collect(const std::string& prefix, ParamList& out) const {
  q.collect(prefix + ".q", out);
  k.collect(prefix + ".k", out);
  v.collect(prefix + ".v", out);
  o.collect(prefix + ".o", out);
}

}  // namespace fgaseg
