#pragma once

// Reverse-mode differentiation over an append-only tape.
//
// A Tape owns every value computed while it records. Var is a lightweight
// handle (tape pointer + node index). Nodes only reference earlier nodes, so
// a reverse sweep over the node list visits them in topological order.
//
// A Tape is single-owner and must not be shared between threads while it
// records or runs backward.

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mrt/tensor.hpp"

namespace mrt {

class Tape;

class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // grad_in[k] is null when input k does not need a gradient; otherwise it
  // points at a zero-initialized (or partially accumulated) buffer shaped like
  // input k. Backward functions add into it.
  using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable input.
  Var leaf(Tensor value);
  // Input held fixed; never receives a gradient.
  Var constant(Tensor value);

  // Appends an op result. Throws NonFiniteError naming `op` if the value has
  // a NaN or Inf. The backward function is dropped when no input needs a
  // gradient.
  Var record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn backward);

  // Seeds d(output)/d(output) = 1 and accumulates gradients into every node
  // that requires one. Output must hold exactly one value of rank <= 1.
  void backward(Var output);

  // Gradient of the last backward() output with respect to v. Zero when v
  // did not influence it.
  Tensor grad(Var v) const;

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Tensor grad;
    bool has_grad = false;
  };

  Var push(Node node);

  std::deque<Node> nodes_;  // stable addresses: value() references survive growth
};

// ---------------------------------------------------------------------------
// Primitive ops. Broadcasting is limited to leading dimensions: the shape of
// the smaller operand must equal a suffix of the larger operand's shape.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);

// a: [..., M, K]; b: [K, N] (shared) or [..., K, N] with a's leading dims.
Var matmul(Var a, Var b);
Var sigmoid(Var a);
Var square(Var a);
// Rank-0 reductions over every element.
Var sum(Var a);
Var mean(Var a);

Var concat(std::span<const Var> parts, int axis);
Var slice(Var a, int axis, std::size_t begin, std::size_t end);
// Swaps the last two dimensions.
Var transpose(Var a);
Var permute(Var a, const std::vector<std::size_t>& order);
Var reshape(Var a, Shape shape);

// x: [..., C_in, L]; weight: [C_out, C_in, k]; bias: [C_out].
// Output [..., C_out, (L + 2*padding - k) / stride + 1].
Var conv1d(Var x, Var weight, Var bias, std::size_t stride, std::size_t padding);
// Adjoint-shaped convolution: y[o, t*stride - padding + j] += w[o, i, j] x[i, t].
// Output length (L - 1) * stride - 2 * padding + k + output_padding.
Var transposed_conv1d(Var x, Var weight, Var bias, std::size_t stride, std::size_t padding,
                      std::size_t output_padding);
// Nearest-neighbour repeat along the last dimension.
Var upsample_nearest(Var x, std::size_t factor);

// Rows are the second-to-last dimension.
// gather_rows: out[..., r, :] = x[..., index[r], :]
Var gather_rows(Var x, std::span<const std::size_t> index);
// scatter_add_rows: out[..., index[r], :] += x[..., r, :], out has `rows` rows.
Var scatter_add_rows(Var x, std::span<const std::size_t> index, std::size_t rows);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Finite-difference checking.

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares reverse-mode gradients against central differences
// (f(x + eps e) - f(x - eps e)) / (2 eps) for every component of every input.
// Relative error is |a - n| / max(1e-12, |a| + |n|).
GradcheckResult gradcheck(const ScalarFn& f, const std::vector<Tensor>& inputs, double eps = 1e-6);
double gradcheck(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps = 1e-6);

}  // namespace mrt
