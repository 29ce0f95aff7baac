#include "endonet/tensor/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "endonet/common/error.hpp"

namespace endonet::tensor {

std::size_t shape_numel(const Shape& shape) noexcept {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : impl_(std::make_shared<Impl>()) {
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<Impl>()) {
  if (shape_numel(shape) != values.size()) {
    throw Error(ErrorCode::ShapeMismatch, "tensor: shape " + shape_string(shape) + " holds " +
                                              std::to_string(shape_numel(shape)) +
                                              " elements but " + std::to_string(values.size()) +
                                              " were given");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

template <typename T>
std::size_t Tensor<T>::dim(int axis) const {
  const int r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw Error(ErrorCode::InvalidArgument,
                "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(r));
  }
  return impl_->shape[static_cast<std::size_t>(a)];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw Error(ErrorCode::ShapeMismatch,
                "item: tensor " + shape_string(shape()) + " is not a single element");
  }
  return impl_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  return *this;
}

template <typename T>
std::span<T> Tensor<T>::ensure_grad() const {
  if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), T{0});
  return impl_->grad;
}

template <typename T>
void Tensor<T>::clear_grad() {
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), T{0});
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(impl_->shape, impl_->data);
  out.impl_->requires_grad = impl_->requires_grad;
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw Error(ErrorCode::ShapeMismatch,
                "reshaped: cannot reshape " + shape_string(impl_->shape) + " as " + shape_string(shape));
  }
  return Tensor(std::move(shape), impl_->data);
}

template class Tensor<float>;
template class Tensor<double>;

const TensorF& find_tensor(const TensorList& list, const std::string& name) {
  auto it = std::find_if(list.begin(), list.end(),
                         [&](const NamedTensor& t) { return t.name == name; });
  if (it == list.end()) throw Error(ErrorCode::InvalidArgument, "missing tensor '" + name + "'");
  return it->tensor;
}

}  // namespace endonet::tensor
