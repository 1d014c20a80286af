#include "fgaseg/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace fgaseg {

namespace {
thread_local DType tl_default_dtype = DType::F32;
thread_local bool tl_grad_enabled = true;
}  // namespace

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

DType default_dtype() { return tl_default_dtype; }

PrecisionScope::PrecisionScope(DType dt) : saved_(tl_default_dtype) { tl_default_dtype = dt; }
PrecisionScope::~PrecisionScope() { tl_default_dtype = saved_; }

bool grad_enabled() { return tl_grad_enabled; }

NoGradGuard::NoGradGuard() : saved_(tl_grad_enabled) { tl_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tl_grad_enabled = saved_; }

namespace detail {

void Buffer::resize(DType dt, std::size_t n) {
  dtype = dt;
  if (dt == DType::F32) {
    f64.clear();
    f64.shrink_to_fit();
    f32.assign(n, 0.0f);
  } else {
    f32.clear();
    f32.shrink_to_fit();
    f64.assign(n, 0.0);
  }
}

void Node::ensure_grad() {
  if (grad.empty() && !value.empty()) grad.resize(value.dtype, value.size());
}

}  // namespace detail

namespace {

void validate_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
}

}  // namespace

Tensor Tensor::make_result(Shape shape, DType dt, const char* op) {
  validate_shape(shape);
  auto n = std::make_shared<detail::Node>();
  n->value.resize(dt, static_cast<std::size_t>(shape_numel(shape)));
  n->shape = std::move(shape);
  n->op = op;
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(const Shape& shape, DType dt) { return make_result(shape, dt, "leaf"); }

Tensor Tensor::full(const Shape& shape, double value, DType dt) {
  Tensor t = zeros(shape, dt);
  dispatch(dt, [&]<class T>() {
    for (auto& x : t.span<T>()) x = static_cast<T>(value);
  });
  return t;
}

Tensor Tensor::scalar(double value, DType dt) { return full({1}, value, dt); }

Tensor Tensor::from_values(const Shape& shape, std::span<const double> values, DType dt) {
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
    throw DimensionError("from_values: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape));
  }
  Tensor t = zeros(shape, dt);
  dispatch(dt, [&]<class T>() {
    auto s = t.span<T>();
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::from_values(const Shape& shape, std::initializer_list<double> values, DType dt) {
  return from_values(shape, std::span<const double>(values.begin(), values.size()), dt);
}

Tensor Tensor::from_floats(const Shape& shape, std::vector<float> values) {
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
    throw DimensionError("from_floats: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape));
  }
  Tensor t = make_result(shape, DType::F32, "leaf");
  t.node_->value.f32 = std::move(values);
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }

std::int64_t Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return shape()[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::numel() const { return shape_numel(shape()); }
DType Tensor::dtype() const { return node_->value.dtype; }
bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw std::logic_error("set_requires_grad on a non-leaf tensor");
  node_->requires_grad = on;
  if (!on) node_->grad = {};
  return *this;
}

bool Tensor::is_leaf() const { return !node_->backward; }
const std::string& Tensor::op_name() const { return node_->op; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

Tensor Tensor::grad() const {
  if (!has_grad()) throw std::logic_error("tensor has no gradient");
  Tensor g = make_result(shape(), dtype(), "grad");
  g.node_->value = node_->grad;
  return g;
}

void Tensor::zero_grad() {
  if (node_) node_->grad = {};
}

void Tensor::backward() const {
  if (numel() != 1) throw DimensionError("backward() needs a scalar, got " + shape_str(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  dispatch(dtype(), [&]<class T>() { node_->grad.data<T>()[0] += T(1); });
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Interior grads are scratch; leaves keep theirs.
  for (auto* n : order) {
    if (n->backward) n->grad = {};
  }
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() needs one element, got " + shape_str(shape()));
  return at(0);
}

double Tensor::at(std::int64_t flat) const {
  if (flat < 0 || flat >= numel()) throw DimensionError("flat index out of range");
  return dispatch(dtype(), [&]<class T>() -> double { return node_->value.data<T>()[flat]; });
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  if (static_cast<int>(index.size()) != rank()) throw DimensionError("index rank mismatch");
  std::int64_t flat = 0;
  std::size_t i = 0;
  for (auto v : index) {
    const auto d = shape()[i++];
    if (v < 0 || v >= d) throw DimensionError("index out of range");
    flat = flat * d + v;
  }
  return at(flat);
}

void Tensor::set(std::int64_t flat, double v) {
  if (flat < 0 || flat >= numel()) throw DimensionError("flat index out of range");
  dispatch(dtype(), [&]<class T>() { node_->value.data<T>()[flat] = static_cast<T>(v); });
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype(), [&]<class T>() {
    const T* p = node_->value.data<T>();
    return std::vector<double>(p, p + numel());
  });
}

std::vector<float> Tensor::to_floats() const {
  return dispatch(dtype(), [&]<class T>() {
    const T* p = node_->value.data<T>();
    std::vector<float> out(static_cast<std::size_t>(numel()));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(p[i]);
    return out;
  });
}

Tensor Tensor::detach() const {
  Tensor t = make_result(shape(), dtype(), "detach");
  t.node_->value = node_->value;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.node_->op = "leaf";
  t.node_->requires_grad = node_->requires_grad && is_leaf();
  return t;
}

namespace {

template <class Dst, class Src>
void convert(const Src* src, Dst* dst, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<Dst>(src[i]);
}

void convert_buffer(const detail::Buffer& src, detail::Buffer& dst) {
  dispatch(src.dtype, [&]<class S>() {
    dispatch(dst.dtype, [&]<class D>() { convert(src.data<S>(), dst.data<D>(), src.size()); });
  });
}

}  // namespace

Tensor Tensor::to(DType dt) const {
  if (dt == dtype()) return *this;
  Tensor out = make_result(shape(), dt, "cast");
  convert_buffer(node_->value, out.node_->value);
  Tensor self = *this;
  attach_backward(out, {self}, [self](detail::Node& o) mutable {
    auto& p = self.raw();
    p.ensure_grad();
    detail::Buffer tmp;
    tmp.resize(p.grad.dtype, p.grad.size());
    convert_buffer(o.grad, tmp);
    dispatch(p.grad.dtype, [&]<class T>() {
      T* g = p.grad.data<T>();
      const T* t = tmp.data<T>();
      for (std::size_t i = 0; i < tmp.size(); ++i) g[i] += t[i];
    });
  });
  return out;
}

void Tensor::cast_(DType dt) {
  if (dt == dtype()) return;
  detail::Buffer nb;
  nb.resize(dt, node_->value.size());
  convert_buffer(node_->value, nb);
  node_->value = std::move(nb);
  node_->grad = {};
}

void Tensor::copy_from(const Tensor& src) {
  if (src.numel() != numel()) throw DimensionError("copy_from: numel mismatch");
  convert_buffer(src.node_->value, node_->value);
}

void attach_backward(Tensor& out, std::vector<Tensor> inputs,
                     std::function<void(detail::Node&)> fn) {
  if (!grad_enabled()) return;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return;
  auto& n = out.raw();
  n.requires_grad = true;
  n.parents.reserve(inputs.size());
  for (auto& t : inputs) n.parents.push_back(t.node());
  n.backward = std::move(fn);
}

void check_finite(const Tensor& t, const std::string& op) {
  dispatch(t.dtype(), [&]<class T>() {
    auto s = t.span<T>();
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (!std::isfinite(s[i])) {
        throw NumericError("non-finite value " + std::to_string(static_cast<double>(s[i])) +
                           " produced by " + op + " at flat index " + std::to_string(i) +
                           " of " + shape_str(t.shape()));
      }
    }
  });
}

}  // namespace fgaseg
