#pragma once

// Dense row-major tensor with an optional gradient buffer.  Tensors are held
// through shared_ptr handles (Var) so autodiff closures can keep inputs
// alive; the tape in autodiff.hpp records how gradients flow between them.

#include <cstdint>
#include <memory>
#include <vector>

#include "css/common.hpp"

namespace css {

template <class Real>
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // same size as data iff requires_grad
  bool requires_grad = false;

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
  }

  int64_t rank() const { return static_cast<int64_t>(shape.size()); }

  int64_t dim(int64_t i) const {
    if (i < 0 || i >= rank())
      throw InternalError("Tensor::dim: axis out of range");
    return shape[static_cast<size_t>(i)];
  }

  int64_t last_dim() const {
    if (shape.empty()) throw InternalError("Tensor::last_dim: rank-0 tensor");
    return shape.back();
  }

  // 2-D convenience accessors; most network code works on [frames x dim].
  int64_t rows() const {
    if (rank() != 2) throw InternalError("Tensor::rows: tensor is not 2-D");
    return shape[0];
  }
  int64_t cols() const {
    if (rank() != 2) throw InternalError("Tensor::cols: tensor is not 2-D");
    return shape[1];
  }

  void set_requires_grad(bool rg) {
    requires_grad = rg;
    if (rg)
      grad.assign(static_cast<size_t>(numel()), Real(0));
    else
      grad.clear();
  }

  void zero_grad() {
    if (requires_grad) grad.assign(grad.size(), Real(0));
  }
};

template <class Real>
using Var = std::shared_ptr<Tensor<Real>>;

template <class Real>
Var<Real> tensor_zeros(std::vector<int64_t> shape, bool requires_grad = false) {
  auto t = std::make_shared<Tensor<Real>>();
  for (int64_t d : shape)
    if (d <= 0)
      throw ShapeError("tensor extents must be positive, got " +
                       shape_to_string(shape));
  t->shape = std::move(shape);
  t->data.assign(static_cast<size_t>(t->numel()), Real(0));
  t->set_requires_grad(requires_grad);
  return t;
}

template <class Real>
Var<Real> tensor_full(std::vector<int64_t> shape, Real value,
                      bool requires_grad = false) {
  auto t = tensor_zeros<Real>(std::move(shape), requires_grad);
  for (auto& v : t->data) v = value;
  return t;
}

template <class Real>
Var<Real> tensor_from(std::vector<int64_t> shape, std::vector<Real> values,
                      bool requires_grad = false) {
  auto t = tensor_zeros<Real>(std::move(shape), requires_grad);
  if (values.size() != t->data.size())
    throw ShapeError("tensor_from: " + std::to_string(values.size()) +
                     " values for shape " + shape_to_string(t->shape));
  t->data = std::move(values);
  return t;
}

template <class Real>
Var<Real> tensor_scalar(Real value, bool requires_grad = false) {
  return tensor_from<Real>({1}, {value}, requires_grad);
}

template <class Real>
bool same_shape(const Tensor<Real>& a, const Tensor<Real>& b) {
  return a.shape == b.shape;
}

}  // namespace css
