#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace pmf {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType { f32, f64 };

std::size_t dtype_size(DType dt);
const char* dtype_name(DType dt);
DType parse_dtype(const std::string& name);

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Calls f.template operator()<T>() with T matching the runtime dtype.
template <class F>
decltype(auto) visit_dtype(DType dt, F&& f) {
  if (dt == DType::f32) return f.template operator()<float>();
  return f.template operator()<double>();
}

using Buffer = std::variant<std::vector<float>, std::vector<double>>;

namespace detail {

struct TensorImpl {
  Shape shape;
  DType dtype = DType::f32;
  Buffer values;
  bool requires_grad = false;
  // False once the tensor is the output of a recorded op.
  bool leaf = true;
  std::optional<Buffer> grad;

  template <class T>
  std::vector<T>& buf() { return std::get<std::vector<T>>(values); }
  template <class T>
  const std::vector<T>& buf() const { return std::get<std::vector<T>>(values); }
};

}  // namespace detail

/// Shared handle to an n-dimensional row-major buffer.
///
/// Copies of a Tensor alias the same storage, the way parameters are shared
/// between a model and its optimizer. Use clone() for an independent copy.
/// A default-constructed Tensor is undefined (defined() == false) and is used
/// for absent optional pieces such as zero-length prompts.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dtype, bool requires_grad = false);
  static Tensor full(Shape shape, double value, DType dtype, bool requires_grad = false);
  static Tensor from_vector(const std::vector<double>& values, Shape shape, DType dtype,
                            bool requires_grad = false);
  template <class T>
  static Tensor from_buffer(std::vector<T> values, Shape shape, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t rows() const;  // 2-D only
  std::size_t cols() const;  // 2-D only
  DType dtype() const;
  std::size_t nbytes() const { return numel() * dtype_size(dtype()); }

  template <class T>
  std::span<T> data() { return impl_->buf<T>(); }
  template <class T>
  std::span<const T> data() const { return impl_->buf<T>(); }

  double item() const;
  double at(std::size_t flat_index) const;
  void set(std::size_t flat_index, double value);
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  /// Only valid on leaves. Turning it off drops any existing grad buffer.
  void set_requires_grad(bool flag);
  bool is_leaf() const;

  bool has_grad() const;
  /// Grad as a detached tensor; throws if absent.
  Tensor grad() const;
  template <class T>
  std::span<T> grad_data() {
    return std::get<std::vector<T>>(*impl_->grad);
  }
  void zero_grad();
  void clear_grad();

  Tensor clone() const;
  /// Bitwise equality of dtype, shape, and values.
  bool equals(const Tensor& other) const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

template <class T>
Tensor Tensor::from_buffer(std::vector<T> values, Shape shape, bool requires_grad) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  if (values.size() != shape_numel(shape)) {
    throw Error("buffer length " + std::to_string(values.size()) + " does not match shape " +
                shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = std::is_same_v<T, float> ? DType::f32 : DType::f64;
  impl->values = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

}  // namespace pmf
