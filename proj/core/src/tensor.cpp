#include "rangevit/tensor.hpp"

#include <algorithm>
#include <unordered_set>

namespace rangevit {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    RV_CHECK(d >= 0, "negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  auto n = std::make_shared<Node>();
  n->value.assign(shape_numel(shape), T(0));
  n->shape = std::move(shape);
  return Tensor(std::move(n));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T fill) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.node_->value.begin(), t.node_->value.end(), fill);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T v) {
  return full({1}, v);
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data) {
  RV_CHECK(shape_numel(shape) == static_cast<int64_t>(data.size()),
           "from_data: " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  return Tensor(std::move(n));
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  RV_CHECK(node_, "shape() on undefined tensor");
  return node_->shape;
}

template <typename T>
int Tensor<T>::ndim() const {
  return static_cast<int>(shape().size());
}

template <typename T>
int64_t Tensor<T>::dim(int axis) const {
  const Shape& s = shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  RV_CHECK(axis >= 0 && axis < static_cast<int>(s.size()),
           "dim(): axis out of range for shape " + shape_str(s));
  return s[axis];
}

template <typename T>
int64_t Tensor<T>::numel() const {
  RV_CHECK(node_, "numel() on undefined tensor");
  return node_->numel();
}

template <typename T>
std::span<const T> Tensor<T>::value() const {
  RV_CHECK(node_, "value() on undefined tensor");
  return {node_->value.data(), node_->value.size()};
}

template <typename T>
std::span<T> Tensor<T>::value_mut() {
  RV_CHECK(node_, "value_mut() on undefined tensor");
  return {node_->value.data(), node_->value.size()};
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  RV_CHECK(node_, "grad() on undefined tensor");
  return {node_->grad.data(), node_->grad.size()};
}

template <typename T>
std::span<T> Tensor<T>::grad_mut() {
  RV_CHECK(node_, "grad_mut() on undefined tensor");
  return {node_->grad.data(), node_->grad.size()};
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return node_ && node_->requires_grad;
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool enable) {
  RV_CHECK(node_, "set_requires_grad() on undefined tensor");
  node_->requires_grad = enable;
  node_->ensure_grad();
  return *this;
}

template <typename T>
void Tensor<T>::zero_grad() {
  RV_CHECK(node_, "zero_grad() on undefined tensor");
  std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
T Tensor<T>::item() const {
  RV_CHECK(node_ && node_->numel() == 1,
           "item() needs a tensor with exactly one element");
  return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  RV_CHECK(node_, "clone() on undefined tensor");
  auto n = std::make_shared<Node>();
  n->shape = node_->shape;
  n->value = node_->value;
  return Tensor(std::move(n));
}

template <typename T>
Tensor<T> Tensor<T>::make_op(Shape shape, const std::vector<Tensor>& inputs) {
  auto n = std::make_shared<Node>();
  n->value.assign(shape_numel(shape), T(0));
  n->shape = std::move(shape);
  for (const Tensor& in : inputs) {
    RV_CHECK(in.defined(), "operation input is undefined");
    n->parents.push_back(in.node_);
    n->requires_grad = n->requires_grad || in.node_->requires_grad;
  }
  if (n->requires_grad) n->ensure_grad();
  return Tensor(std::move(n));
}

template <typename T>
void Tensor<T>::set_backward(std::function<void(Node&)> fn) {
  RV_CHECK(node_, "set_backward() on undefined tensor");
  if (node_->requires_grad) node_->backward = std::move(fn);
}

template <typename T>
void backward(const Tensor<T>& loss) {
  RV_CHECK(loss.defined(), "backward: undefined loss");
  RV_CHECK(loss.numel() == 1, "backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  auto root = loss.node();
  RV_CHECK(root->requires_grad, "backward: graph is detached, loss does not require grad");
  RV_CHECK(!root->backward_ran, "backward: already ran for this loss; run a fresh forward pass");

  using Node = detail::TensorNode<T>;
  // iterative post-order DFS over parents
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({root.get(), 0});
  visited.insert(root.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Node* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
  root->backward_ran = true;
}

template class Tensor<float>;
template class Tensor<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace rangevit
