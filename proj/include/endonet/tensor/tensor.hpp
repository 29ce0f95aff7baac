#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace endonet::tensor {

using Shape = std::vector<std::size_t>;

enum class DType : std::uint8_t { f32, f64 };

template <typename T>
constexpr DType dtype_of() noexcept;
template <>
constexpr DType dtype_of<float>() noexcept { return DType::f32; }
template <>
constexpr DType dtype_of<double>() noexcept { return DType::f64; }

std::size_t shape_numel(const Shape& shape) noexcept;
std::string shape_string(const Shape& shape);

/// Row-major dense tensor handle. Copies share storage (like a reference);
/// use clone() for an independent copy. Gradients live next to the data and
/// are allocated lazily by backward.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const noexcept { return impl_ != nullptr; }
  static constexpr DType dtype() noexcept { return dtype_of<T>(); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  /// Extent of `axis`; negative axes count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  std::vector<T>& values() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }
  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }
  T item() const;

  bool requires_grad() const noexcept { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  /// True unless the tensor was produced by a recorded op.
  bool is_leaf() const noexcept { return !impl_ || impl_->leaf; }

  bool has_grad() const noexcept { return impl_ && !impl_->grad.empty(); }
  std::span<T> grad() { return impl_->grad; }
  std::span<const T> grad() const { return impl_->grad; }
  /// Allocates a zero gradient buffer if none exists. Handle semantics: the
  /// buffer is shared, so this is callable through a const handle.
  std::span<T> ensure_grad() const;
  /// Drops the gradient buffer entirely.
  void clear_grad();
  /// Keeps the buffer but fills it with zeros.
  void zero_grad();

  Tensor clone() const;
  /// Detached copy with a new shape of equal size.
  Tensor reshaped(Shape shape) const;

  bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

  void mark_non_leaf() { impl_->leaf = false; }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    bool leaf = true;
  };
  std::shared_ptr<Impl> impl_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// Converts between precisions (detached copy).
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> out(t.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>(t[i]);
  return Tensor<To>(t.shape(), std::move(out));
}

struct NamedTensor {
  std::string name;
  TensorF tensor;
};
using TensorList = std::vector<NamedTensor>;

/// Finds `name` in `list`; throws InvalidArgument when absent.
const TensorF& find_tensor(const TensorList& list, const std::string& name);

}  // namespace endonet::tensor
