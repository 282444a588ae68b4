#pragma once

// Graph and temporal building blocks. Feature tensors are laid out
// [..., T, N, C]: optional batch dims, frames, joints, channels.
//
// Parameter structs are templated on the value type so one definition serves
// both stored weights (Tensor) and weights bound to a tape (Var). Each struct
// exposes visit(self, f) calling f(name, member) for every tensor it owns.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mrt/autodiff.hpp"
#include "mrt/error.hpp"
#include "mrt/random.hpp"

namespace mrt {

// Bone list of a rooted tree. Joints may be in any order; bones are listed in
// increasing order of their child joint.
struct Topology {
  std::size_t joints = 0;
  std::size_t root = 0;
  std::vector<std::size_t> bone_parent;
  std::vector<std::size_t> bone_child;

  static Topology from_parents(std::span<const int> parent);
  std::size_t bones() const noexcept { return bone_parent.size(); }
};

template <typename Sub, typename F>
void visit_nested(const std::string& prefix, Sub& sub, F& f) {
  std::remove_const_t<Sub>::visit(sub, [&](const std::string& name, auto& v) { f(prefix + "." + name, v); });
}

template <typename T>
struct GraphConvParams {
  T w_r, w_p, w_c;  // [out, in]
  T bias;           // [out]

  template <typename Self, typename F>
  static void visit(Self& s, F&& f) {
    f("w_r", s.w_r);
    f("w_p", s.w_p);
    f("w_c", s.w_c);
    f("bias", s.bias);
  }
};

template <typename T>
struct EdgeGraphConvParams {
  T w_e;                // [out, 1]
  T w_minus, w_plus;    // [out, in], parent side and child side
  T edge_bias;          // [out]
  T w_r;                // [out, in]
  T w_p, w_c;           // [out, out]
  T node_bias;          // [out]

  template <typename Self, typename F>
  static void visit(Self& s, F&& f) {
    f("w_e", s.w_e);
    f("w_minus", s.w_minus);
    f("w_plus", s.w_plus);
    f("edge_bias", s.edge_bias);
    f("w_r", s.w_r);
    f("w_p", s.w_p);
    f("w_c", s.w_c);
    f("node_bias", s.node_bias);
  }
};

inline constexpr std::size_t kTemporalKernel = 3;

template <typename T>
struct TemporalConvParams {
  T kernel;  // [out, in, 3]
  T bias;    // [out]

  template <typename Self, typename F>
  static void visit(Self& s, F&& f) {
    f("kernel", s.kernel);
    f("bias", s.bias);
  }
};

template <typename T>
struct DenseParams {
  T weight;  // [out, in]
  T bias;    // [out]

  template <typename Self, typename F>
  static void visit(Self& s, F&& f) {
    f("weight", s.weight);
    f("bias", s.bias);
  }
};

GraphConvParams<Tensor> make_graph_conv(std::size_t in, std::size_t out, Rng& rng);
EdgeGraphConvParams<Tensor> make_edge_graph_conv(std::size_t in, std::size_t out, Rng& rng);
TemporalConvParams<Tensor> make_temporal_conv(std::size_t in, std::size_t out, Rng& rng);
DenseParams<Tensor> make_dense(std::size_t in, std::size_t out, Rng& rng);

// Checks the structural invariants of each parameter type (matching shapes,
// k = 3, consistent edge/node widths). Throws ShapeError.
void check_params(const GraphConvParams<Tensor>& p);
void check_params(const EdgeGraphConvParams<Tensor>& p);
void check_params(const TemporalConvParams<Tensor>& p);
void check_params(const DenseParams<Tensor>& p);

// Puts every tensor of a parameter struct on the tape, as trainable leaves or
// as constants.
template <template <typename> class P>
P<Var> bind(Tape& tape, const P<Tensor>& params, bool trainable) {
  std::vector<const Tensor*> src;
  P<Tensor>::visit(params, [&](const std::string&, const Tensor& t) { src.push_back(&t); });
  P<Var> out;
  std::size_t k = 0;
  P<Var>::visit(out, [&](const std::string&, Var& v) {
    v = trainable ? tape.leaf(*src[k]) : tape.constant(*src[k]);
    ++k;
  });
  return out;
}

// Collects d(last backward output)/d(param) for every bound tensor.
template <template <typename> class P>
P<Tensor> gradients(const Tape& tape, const P<Var>& bound) {
  std::vector<Tensor> g;
  P<Var>::visit(bound, [&](const std::string&, const Var& v) { g.push_back(tape.grad(v)); });
  P<Tensor> out;
  std::size_t k = 0;
  P<Tensor>::visit(out, [&](const std::string&, Tensor& t) { t = std::move(g[k++]); });
  return out;
}

// Tensors of a parameter struct in visit order, and the inverse over Vars
// (consumes vars from `next` on).
template <template <typename> class P>
std::vector<Tensor> flatten(const P<Tensor>& params) {
  std::vector<Tensor> out;
  P<Tensor>::visit(params, [&](const std::string&, const Tensor& t) { out.push_back(t); });
  return out;
}

template <template <typename> class P>
P<Var> unflatten(std::span<const Var> vars, std::size_t& next) {
  P<Var> out;
  P<Var>::visit(out, [&](const std::string&, Var& v) {
    if (next >= vars.size()) throw ShapeError("unflatten: too few variables");
    v = vars[next++];
  });
  return out;
}

// sigma(W_r x_i + sum_{children j} W_c x_j + sum_{parent j} W_p x_j + bias)
Var node_graph_conv(Var x, const Topology& topo, const GraphConvParams<Var>& p);

// Edge step on each bone (i parent, j child):
//   e_ij = sigma(W_e [length] + W_minus x_i + W_plus x_j + edge_bias)
// Node step:
//   sigma(W_r x_i + sum_{children j} W_c e_ij + sum_{parent j} W_p e_ji + node_bias)
// lengths: [bones] in topology bone order.
Var edge_node_graph_conv(Var x, Var lengths, const Topology& topo, const EdgeGraphConvParams<Var>& p);

// Data-dependent rescaling: each output channel's weights are scaled so its
// pre-activations over x have unit standard deviation, and its bias is set to
// centre them. Keeps every sigmoid in its responsive range. Returns the layer
// output on x after the update.
Tensor calibrate(GraphConvParams<Tensor>& p, const Tensor& x, const Topology& topo);
// Linear layers: only the bias changes, so the output has zero mean per
// channel. apply is temporal_down or a bound temporal_up.
Tensor calibrate(TemporalConvParams<Tensor>& p, const Tensor& x,
                 const std::function<Var(Var, const TemporalConvParams<Var>&)>& apply);
Tensor calibrate(DenseParams<Tensor>& p, const Tensor& x);
// Calibrates the edge step first, then the node step on the new edge features.
Tensor calibrate(EdgeGraphConvParams<Tensor>& p, const Tensor& x, const Tensor& lengths, const Topology& topo);

enum class UpVariant { upsample, transposed };
std::string to_string(UpVariant v);
UpVariant parse_up_variant(std::string_view s);

// Stride-2 convolution over frames (k 3, padding 1), shared across joints.
// T must be even; output has T / 2 frames. No activation.
Var temporal_down(Var x, const TemporalConvParams<Var>& p);
// Doubles the frame count. upsample: nearest x2 then k3 s1 p1 convolution;
// transposed: k3 s2 p1 transposed convolution with output padding 1.
Var temporal_up(Var x, const TemporalConvParams<Var>& p, UpVariant variant);

// W x + b over the last dimension. A rank-1 x is treated as a single row.
Var dense(Var x, const DenseParams<Var>& p);

}  // namespace mrt
