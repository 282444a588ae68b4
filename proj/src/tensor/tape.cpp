#include <cmath>
#include <string>

#include "mrt/autodiff.hpp"
#include "mrt/error.hpp"

namespace mrt {

const Tensor& Var::value() const { return tape_->value(id_); }

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value) {
  if (!value.all_finite()) throw NonFiniteError("leaf: non-finite input value");
  Node node;
  node.value = std::move(value);
  node.requires_grad = true;
  return push(std::move(node));
}

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) throw NonFiniteError("constant: non-finite input value");
  Node node;
  node.value = std::move(value);
  return push(std::move(node));
}

Var Tape::record(std::string_view op, Tensor value, std::span<const Var> inputs,
                 BackwardFn backward) {
  if (!value.all_finite()) {
    throw NonFiniteError(std::string(op) + ": non-finite result of shape " +
                         shape_str(value.shape()));
  }
  Node node;
  node.value = std::move(value);
  node.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    if (in.tape() != this) throw Error(std::string(op) + ": input belongs to a different tape");
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  return push(std::move(node));
}

void Tape::backward(Var output) {
  if (output.tape() != this) throw Error("backward: output belongs to a different tape");
  const Tensor& out = nodes_[output.id()].value;
  if (out.size() != 1 || out.rank() > 1) {
    throw ShapeError("backward: output must be scalar, got shape " + shape_str(out.shape()));
  }
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  Node& root = nodes_[output.id()];
  if (!root.requires_grad) return;
  root.grad = Tensor(root.value.shape(), 1.0);
  root.has_grad = true;

  std::vector<Tensor*> grad_in;
  for (std::size_t i = output.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.has_grad || !node.backward) continue;
    grad_in.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      Node& in = nodes_[node.inputs[k]];
      if (!in.requires_grad) continue;
      if (!in.has_grad) {
        in.grad = Tensor(in.value.shape(), 0.0);
        in.has_grad = true;
      }
      grad_in[k] = &in.grad;
    }
    node.backward(node.grad, grad_in);
  }
}

Tensor Tape::grad(Var v) const {
  const Node& node = nodes_[v.id()];
  if (node.has_grad) return node.grad;
  return Tensor(node.value.shape(), 0.0);
}

}  // namespace mrt
