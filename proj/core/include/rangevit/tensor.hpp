#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rangevit/common.hpp"

namespace rangevit {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One node of the reverse-mode tape. Nodes form a DAG through `parents`; the
// tape is the implicit topological order of that DAG. `backward` reads this
// node's grad and accumulates (adds, never overwrites) into parent grads.
template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // same length as value once allocated, kept zero-filled
  bool requires_grad = false;
  bool backward_ran = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

}  // namespace detail

// Dense tensor handle participating in a reverse-mode autodiff graph.
// Copies are shallow (they alias the same node); clone() makes a detached
// deep copy. Graphs are built and differentiated on a single thread.
//
// float is the training/inference precision; double exists for finite
// difference gradient checks.
template <typename T>
class Tensor {
 public:
  using Node = detail::TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T fill);
  static Tensor scalar(T v);
  static Tensor from_data(Shape shape, std::vector<T> data);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int ndim() const;
  int64_t dim(int axis) const;
  int64_t numel() const;

  std::span<const T> value() const;
  // Leaf mutation is only safe between forward passes (optimizer updates,
  // external initialization); mutating a node inside a live graph corrupts
  // the recorded values its backward depends on.
  std::span<T> value_mut();
  std::span<const T> grad() const;  // empty when no grad buffer is allocated
  std::span<T> grad_mut();

  bool requires_grad() const;
  // Enabling allocates the grad buffer. Disabling keeps the buffer (zeroed)
  // so frozen parameters still expose an exactly-zero gradient.
  Tensor& set_requires_grad(bool enable);
  void zero_grad();

  T item() const;

  Tensor clone() const;

  // op plumbing: allocates the result node, wires parents, propagates the
  // requires_grad flag
  static Tensor make_op(Shape shape, const std::vector<Tensor>& inputs);
  void set_backward(std::function<void(Node&)> fn);
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  std::shared_ptr<Node> node_;
};

// Reverse-mode accumulation from a scalar loss: visits the recorded graph in
// exact reverse topological order once. Throws if the loss is not scalar, if
// the graph is detached (loss does not require grad), or if backward already
// ran for this loss without a fresh forward pass.
template <typename T>
void backward(const Tensor<T>& loss);

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template void backward<float>(const Tensor<float>&);
extern template void backward<double>(const Tensor<double>&);

}  // namespace rangevit
