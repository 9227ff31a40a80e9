#include "pmf/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>

namespace pmf {

std::size_t dtype_size(DType dt) { return dt == DType::f32 ? 4 : 8; }

const char* dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(const std::string& name) {
  if (name == "f32" || name == "float32") return DType::f32;
  if (name == "f64" || name == "float64") return DType::f64;
  throw Error("unknown dtype '" + name + "'");
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace {

void check_shape(const Shape& shape) {
  for (auto e : shape) {
    if (e == 0) throw Error("tensor extents must be positive, got " + shape_str(shape));
  }
}

}  // namespace

Tensor Tensor::zeros(Shape shape, DType dtype, bool requires_grad) {
  return full(std::move(shape), 0.0, dtype, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, DType dtype, bool requires_grad) {
  check_shape(shape);
  auto impl = std::make_shared<detail::TensorImpl>();
  const auto n = shape_numel(shape);
  impl->shape = std::move(shape);
  impl->dtype = dtype;
  impl->requires_grad = requires_grad;
  visit_dtype(dtype, [&]<class T>() { impl->values = std::vector<T>(n, static_cast<T>(value)); });
  return Tensor(std::move(impl));
}

Tensor Tensor::from_vector(const std::vector<double>& values, Shape shape, DType dtype,
                           bool requires_grad) {
  check_shape(shape);
  if (values.size() != shape_numel(shape)) {
    throw Error("value count " + std::to_string(values.size()) + " does not match shape " +
                shape_str(shape));
  }
  return visit_dtype(dtype, [&]<class T>() {
    return from_buffer(std::vector<T>(values.begin(), values.end()), std::move(shape),
                       requires_grad);
  });
}

const Shape& Tensor::shape() const {
  if (!impl_) throw Error("undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::size_t Tensor::rows() const {
  if (dim() != 2) throw Error("rows() needs a 2-D tensor, got " + shape_str(shape()));
  return impl_->shape[0];
}

std::size_t Tensor::cols() const {
  if (dim() != 2) throw Error("cols() needs a 2-D tensor, got " + shape_str(shape()));
  return impl_->shape[1];
}

DType Tensor::dtype() const {
  if (!impl_) throw Error("undefined tensor");
  return impl_->dtype;
}

double Tensor::item() const {
  if (numel() != 1) throw Error("item() on tensor of shape " + shape_str(shape()));
  return at(0);
}

double Tensor::at(std::size_t i) const {
  return visit_dtype(dtype(), [&]<class T>() { return static_cast<double>(data<T>()[i]); });
}

void Tensor::set(std::size_t i, double value) {
  visit_dtype(dtype(), [&]<class T>() { data<T>()[i] = static_cast<T>(value); });
}

std::vector<double> Tensor::to_vector() const {
  return visit_dtype(dtype(), [&]<class T>() {
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!impl_) throw Error("undefined tensor");
  if (!impl_->leaf) throw Error("requires_grad can only be changed on leaf tensors");
  impl_->requires_grad = flag;
  if (!flag) impl_->grad.reset();
}

bool Tensor::is_leaf() const { return impl_ && impl_->leaf; }

bool Tensor::has_grad() const { return impl_ && impl_->grad.has_value(); }

Tensor Tensor::grad() const {
  if (!has_grad()) throw Error("tensor has no grad");
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = impl_->dtype;
  impl->values = *impl_->grad;
  return Tensor(std::move(impl));
}

void Tensor::zero_grad() {
  if (!impl_ || !impl_->grad) return;
  std::visit([](auto& v) { std::fill(v.begin(), v.end(), 0); }, *impl_->grad);
}

void Tensor::clear_grad() {
  if (impl_) impl_->grad.reset();
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape();
  impl->dtype = impl_->dtype;
  impl->values = impl_->values;
  impl->requires_grad = impl_->requires_grad;
  return Tensor(std::move(impl));
}

bool Tensor::equals(const Tensor& other) const {
  if (!defined() || !other.defined()) return defined() == other.defined();
  if (dtype() != other.dtype() || shape() != other.shape()) return false;
  return visit_dtype(dtype(), [&]<class T>() {
    auto a = data<T>();
    auto b = other.data<T>();
    return std::memcmp(a.data(), b.data(), a.size_bytes()) == 0;
  });
}

}  // namespace pmf
