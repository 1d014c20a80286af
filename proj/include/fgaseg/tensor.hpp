#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fgaseg {

// Error taxonomy shared by every module.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct InputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { F32, F64 };

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Dtype used by factory functions when none is given. F32 unless a
/// PrecisionScope is active on this thread.
DType default_dtype();

class PrecisionScope {
 public:
  explicit PrecisionScope(DType dt);
  ~PrecisionScope();
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  DType saved_;
};

bool grad_enabled();

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

namespace detail {

struct Buffer {
  DType dtype = DType::F32;
  std::vector<float> f32;
  std::vector<double> f64;

  std::size_t size() const { return dtype == DType::F32 ? f32.size() : f64.size(); }
  bool empty() const { return size() == 0; }
  void resize(DType dt, std::size_t n);

  template <class T>
  T* data();
  template <class T>
  const T* data() const;
};

template <>
inline float* Buffer::data<float>() { return f32.data(); }
template <>
inline double* Buffer::data<double>() { return f64.data(); }
template <>
inline const float* Buffer::data<float>() const { return f32.data(); }
template <>
inline const double* Buffer::data<double>() const { return f64.data(); }

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;
  std::string op;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward;

  void ensure_grad();
};

}  // namespace detail

/// Dense row-major tensor handle. Copies share storage; use clone() for a
/// deep copy. Holds either 32-bit or 64-bit floats.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, DType dt = default_dtype());
  static Tensor full(const Shape& shape, double value, DType dt = default_dtype());
  static Tensor scalar(double value, DType dt = default_dtype());
  static Tensor from_values(const Shape& shape, std::span<const double> values,
                            DType dt = default_dtype());
  static Tensor from_values(const Shape& shape, std::initializer_list<double> values,
                            DType dt = default_dtype());
  static Tensor from_floats(const Shape& shape, std::vector<float> values);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::int64_t dim(int axis) const;
  std::int64_t numel() const;
  DType dtype() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;
  const std::string& op_name() const;

  bool has_grad() const;
  /// Detached copy of the accumulated gradient; throws if none.
  Tensor grad() const;
  void zero_grad();
  /// Runs reverse-mode accumulation from this scalar.
  void backward() const;

  double item() const;
  double at(std::int64_t flat) const;
  double at(std::initializer_list<std::int64_t> index) const;
  void set(std::int64_t flat, double v);
  std::vector<double> to_vector() const;
  std::vector<float> to_floats() const;

  template <class T>
  std::span<T> span();
  template <class T>
  std::span<const T> span() const;

  Tensor detach() const;
  Tensor clone() const;
  /// Differentiable dtype conversion.
  Tensor to(DType dt) const;
  /// Converts storage in place; keeps identity (used for parameters).
  void cast_(DType dt);
  /// Overwrites values from another tensor of the same numel.
  void copy_from(const Tensor& src);

  bool same_node(const Tensor& o) const { return node_ == o.node_; }

  // Graph construction hook used by ops.
  static Tensor make_result(Shape shape, DType dt, const char* op);
  std::shared_ptr<detail::Node> node() const { return node_; }
  detail::Node& raw() const { return *node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;
};

template <class T>
std::span<T> Tensor::span() {
  auto& b = node_->value;
  if ((std::is_same_v<T, float> && b.dtype != DType::F32) ||
      (std::is_same_v<T, double> && b.dtype != DType::F64)) {
    throw std::logic_error("Tensor::span: dtype mismatch");
  }
  return {b.template data<T>(), b.size()};
}

template <class T>
std::span<const T> Tensor::span() const {
  const auto& b = node_->value;
  if ((std::is_same_v<T, float> && b.dtype != DType::F32) ||
      (std::is_same_v<T, double> && b.dtype != DType::F64)) {
    throw std::logic_error("Tensor::span: dtype mismatch");
  }
  return {b.template data<T>(), b.size()};
}

/// Calls f.template operator()<T>() with T = float or double.
template <class F>
decltype(auto) dispatch(DType dt, F&& f) {
  if (dt == DType::F32) return f.template operator()<float>();
  return f.template operator()<double>();
}

/// Records `out` as the result of an op over `inputs` when any input needs a
/// gradient; otherwise leaves it a constant leaf.
void attach_backward(Tensor& out, std::vector<Tensor> inputs,
                     std::function<void(detail::Node&)> fn);

/// Throws NumericError naming `op` on the first NaN/Inf in t.
void check_finite(const Tensor& t, const std::string& op);

}  // namespace fgaseg
