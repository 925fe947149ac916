#include "tomoforge/autograd.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace tomoforge {

std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

template <typename T>
Var<T> Tape<T>::push(Node node, std::string_view op) {
  if (checked_) {
    for (T v : node.value.values()) {
      if (!std::isfinite(v))
        throw NumericError("non-finite value produced by " + std::string(op) + " (node " +
                           std::to_string(nodes_.size()) + ")");
    }
  }
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n), "constant");
}

template <typename T>
Var<T> Tape<T>::variable(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n), "variable");
}

template <typename T>
Var<T> Tape<T>::parameter(Parameter<T>& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = p.trainable;
  n.param = &p;
  return push(std::move(n), p.name);
}

template <typename T>
Var<T> Tape<T>::record(std::string_view op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                       Backward fn) {
  return record(op, std::move(value), std::vector<Var<T>>(inputs), std::move(fn));
}

template <typename T>
Var<T> Tape<T>::record(std::string_view op, Tensor<T> value, const std::vector<Var<T>>& inputs,
                       Backward fn) {
  Node n;
  n.value = std::move(value);
  for (const auto& in : inputs) {
    if (&in.tape() != this) throw std::logic_error(std::string(op) + ": input from another tape");
    n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n), op);
}

template <typename T>
Tensor<T>* Tape<T>::grad_slot(const Var<T>& v) {
  Node& n = nodes_[v.id()];
  if (!n.requires_grad) return nullptr;
  if (!n.has_grad) {
    n.grad = Tensor<T>(n.value.shape());
    n.has_grad = true;
  }
  return &n.grad;
}

template <typename T>
const Tensor<T>* Tape<T>::grad(const Var<T>& v) const {
  const Node& n = nodes_[v.id()];
  return n.has_grad ? &n.grad : nullptr;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (consumed_) throw std::logic_error("Tape::backward: tape already used for a reverse pass");
  consumed_ = true;
  Node& root = nodes_.at(loss.id());
  if (root.value.numel() != 1)
    throw ShapeError("Tape::backward: loss must be a scalar, got " + shape_string(root.value.shape()));
  if (!root.requires_grad) return;
  root.grad = Tensor<T>(root.value.shape(), T(1));
  root.has_grad = true;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.has_grad) continue;
    if (n.backward) n.backward(*this, n.grad, n.value);
    if (n.param != nullptr && n.param->trainable) {
      Parameter<T>& p = *n.param;
      if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
      for (std::size_t i = 0; i < p.grad.numel(); ++i) p.grad[i] += n.grad[i];
    }
  }
}

template <typename T>
void Tape<T>::clear() {
  nodes_.clear();
  consumed_ = false;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace tomoforge
