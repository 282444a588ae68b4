#include "mrt/layers.hpp"

#include <cmath>
#include <functional>

#include "mrt/error.hpp"

namespace mrt {

Topology Topology::from_parents(std::span<const int> parent) {
  const std::size_t n = parent.size();
  if (n == 0) throw ShapeError("topology: no joints");
  Topology t;
  t.joints = n;
  std::size_t roots = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int p = parent[i];
    if (p < 0) {
      t.root = i;
      ++roots;
      continue;
    }
    if (static_cast<std::size_t>(p) >= n) throw ShapeError("topology: parent index out of range at joint " + std::to_string(i));
    t.bone_parent.push_back(static_cast<std::size_t>(p));
    t.bone_child.push_back(i);
  }
  if (roots != 1) throw ShapeError("topology: expected exactly one root, found " + std::to_string(roots));
  for (std::size_t i = 0; i < n; ++i) {
    int j = static_cast<int>(i);
    std::size_t steps = 0;
    while (j >= 0 && steps++ <= n) j = parent[static_cast<std::size_t>(j)];
    if (j >= 0) throw ShapeError("topology: cycle through joint " + std::to_string(i));
  }
  return t;
}

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = uniform(rng, -bound, bound);
  return t;
}

Tensor weight(std::size_t out, std::size_t in, Rng& rng) {
  return uniform_tensor({out, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
}

void expect_shape(const Tensor& t, const Shape& shape, const char* what) {
  if (t.shape() != shape) {
    throw ShapeError(std::string(what) + ": expected shape " + shape_str(shape) + ", got " + shape_str(t.shape()));
  }
}

std::size_t rank_of(Var x, std::size_t min_rank, const char* what) {
  const std::size_t r = x.shape().size();
  if (r < min_rank) throw ShapeError(std::string(what) + ": input rank " + std::to_string(r) + " is too small");
  return r;
}

void check_nodes(Var x, const Topology& topo, const char* what) {
  rank_of(x, 3, what);
  if (x.shape()[x.shape().size() - 2] != topo.joints) {
    throw ShapeError(std::string(what) + ": input has " + std::to_string(x.shape()[x.shape().size() - 2]) +
                     " joints, topology has " + std::to_string(topo.joints));
  }
}

void check_channels(Var x, const Tensor& w, const char* what) {
  if (x.shape().empty()) throw ShapeError(std::string(what) + ": input is a scalar");
  if (x.shape().back() != w.shape()[1]) {
    throw ShapeError(std::string(what) + ": input has " + std::to_string(x.shape().back()) + " channels, weights expect " +
                     std::to_string(w.shape()[1]));
  }
}

// x [..., R, C] times w^T for w [out, C].
Var linear(Var x, Var w) { return matmul(x, transpose(w)); }

// Permutations between [..., T, N, C] and [..., N, C, T].
std::vector<std::size_t> to_time_last(std::size_t r) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i + 3 < r; ++i) order.push_back(i);
  order.insert(order.end(), {r - 2, r - 1, r - 3});
  return order;
}

std::vector<std::size_t> from_time_last(std::size_t r) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i + 3 < r; ++i) order.push_back(i);
  order.insert(order.end(), {r - 1, r - 3, r - 2});
  return order;
}

}  // namespace

GraphConvParams<Tensor> make_graph_conv(std::size_t in, std::size_t out, Rng& rng) {
  GraphConvParams<Tensor> p;
  p.w_r = weight(out, in, rng);
  p.w_p = weight(out, in, rng);
  p.w_c = weight(out, in, rng);
  p.bias = Tensor({out});
  return p;
}

EdgeGraphConvParams<Tensor> make_edge_graph_conv(std::size_t in, std::size_t out, Rng& rng) {
  EdgeGraphConvParams<Tensor> p;
  p.w_e = weight(out, 1, rng);
  p.w_minus = weight(out, in, rng);
  p.w_plus = weight(out, in, rng);
  p.edge_bias = Tensor({out});
  p.w_r = weight(out, in, rng);
  p.w_p = weight(out, out, rng);
  p.w_c = weight(out, out, rng);
  p.node_bias = Tensor({out});
  return p;
}

TemporalConvParams<Tensor> make_temporal_conv(std::size_t in, std::size_t out, Rng& rng) {
  TemporalConvParams<Tensor> p;
  p.kernel = uniform_tensor({out, in, kTemporalKernel}, 1.0 / std::sqrt(static_cast<double>(in * kTemporalKernel)), rng);
  p.bias = Tensor({out});
  return p;
}

DenseParams<Tensor> make_dense(std::size_t in, std::size_t out, Rng& rng) {
  return {weight(out, in, rng), Tensor({out})};
}

void check_params(const GraphConvParams<Tensor>& p) {
  if (p.w_r.rank() != 2) throw ShapeError("graph conv: W_r must be a matrix");
  expect_shape(p.w_p, p.w_r.shape(), "graph conv W_p");
  expect_shape(p.w_c, p.w_r.shape(), "graph conv W_c");
  expect_shape(p.bias, {p.w_r.shape()[0]}, "graph conv bias");
}

void check_params(const EdgeGraphConvParams<Tensor>& p) {
  if (p.w_r.rank() != 2) throw ShapeError("edge graph conv: W_r must be a matrix");
  const std::size_t out = p.w_r.shape()[0];
  const std::size_t in = p.w_r.shape()[1];
  expect_shape(p.w_e, {out, 1}, "edge graph conv W_e");
  expect_shape(p.w_minus, {out, in}, "edge graph conv W_minus");
  expect_shape(p.w_plus, {out, in}, "edge graph conv W_plus");
  expect_shape(p.edge_bias, {out}, "edge graph conv edge bias");
  expect_shape(p.w_p, {out, out}, "edge graph conv W_p");
  expect_shape(p.w_c, {out, out}, "edge graph conv W_c");
  expect_shape(p.node_bias, {out}, "edge graph conv node bias");
}

void check_params(const TemporalConvParams<Tensor>& p) {
  if (p.kernel.rank() != 3 || p.kernel.shape()[2] != kTemporalKernel) {
    throw ShapeError("temporal conv: kernel must be [out, in, 3], got " + shape_str(p.kernel.shape()));
  }
  expect_shape(p.bias, {p.kernel.shape()[0]}, "temporal conv bias");
}

void check_params(const DenseParams<Tensor>& p) {
  if (p.weight.rank() != 2) throw ShapeError("dense: weight must be a matrix");
  expect_shape(p.bias, {p.weight.shape()[0]}, "dense bias");
}

namespace {

// W_r x_i + sum_{children j} W_c x_j + sum_{parent j} W_p x_j, without bias.
Var node_core(Var x, const Topology& topo, const GraphConvParams<Var>& p) {
  check_nodes(x, topo, "node_graph_conv");
  check_channels(x, p.w_r.value(), "node_graph_conv");
  Var acc = linear(x, p.w_r);
  if (topo.bones() > 0) {
    const std::size_t n = topo.joints;
    // Children feed their parent through W_c, parents feed children through W_p.
    acc = acc + scatter_add_rows(gather_rows(linear(x, p.w_c), topo.bone_child), topo.bone_parent, n);
    acc = acc + scatter_add_rows(gather_rows(linear(x, p.w_p), topo.bone_parent), topo.bone_child, n);
  }
  return acc;
}

void check_edge_inputs(Var x, Var lengths, const Topology& topo, const EdgeGraphConvParams<Var>& p) {
  check_nodes(x, topo, "edge_node_graph_conv");
  check_channels(x, p.w_r.value(), "edge_node_graph_conv");
  // A single-joint topology has no bones; its lengths argument is ignored.
  const std::size_t given = shape_numel(lengths.shape());
  if (topo.bones() > 0 && given != topo.bones()) {
    throw ShapeError("edge_node_graph_conv: got " + std::to_string(given) + " bone lengths, topology has " +
                     std::to_string(topo.bones()) + " bones");
  }
}

// Edge pre-activation [..., bones, out], without edge bias. Requires bones.
Var edge_core(Var x, Var lengths, const Topology& topo, const EdgeGraphConvParams<Var>& p) {
  const Var raw = reshape(lengths, {topo.bones(), 1});
  return gather_rows(linear(x, p.w_minus), topo.bone_parent) + gather_rows(linear(x, p.w_plus), topo.bone_child) +
         linear(raw, p.w_e);
}

// Node pre-activation given edge features e, without node bias.
Var edge_node_core(Var x, Var e, const Topology& topo, const EdgeGraphConvParams<Var>& p) {
  Var acc = linear(x, p.w_r);
  if (topo.bones() > 0) {
    acc = acc + scatter_add_rows(linear(e, p.w_c), topo.bone_parent, topo.joints);
    acc = acc + scatter_add_rows(linear(e, p.w_p), topo.bone_child, topo.joints);
  }
  return acc;
}

}  // namespace

Var node_graph_conv(Var x, const Topology& topo, const GraphConvParams<Var>& p) {
  return sigmoid(node_core(x, topo, p) + p.bias);
}

Var edge_node_graph_conv(Var x, Var lengths, const Topology& topo, const EdgeGraphConvParams<Var>& p) {
  check_edge_inputs(x, lengths, topo, p);
  Var e;
  if (topo.bones() > 0) e = sigmoid(edge_core(x, lengths, topo, p) + p.edge_bias);
  return sigmoid(edge_node_core(x, e, topo, p) + p.node_bias);
}

namespace {

// Per output channel: factor bringing the standard deviation over all rows of
// pre to 1, and the mean after that scaling. Constant channels keep factor 1.
struct ChannelFit {
  std::vector<double> factor;
  std::vector<double> mean;
};

ChannelFit fit_channels(const Tensor& pre) {
  const std::size_t c = pre.shape().back();
  const std::size_t rows = pre.size() / c;
  ChannelFit fit{std::vector<double>(c, 1.0), std::vector<double>(c, 0.0)};
  for (std::size_t k = 0; k < c; ++k) {
    double mean = 0.0;
    for (std::size_t r = 0; r < rows; ++r) mean += pre[r * c + k];
    mean /= static_cast<double>(rows);
    double var = 0.0;
    for (std::size_t r = 0; r < rows; ++r) var += (pre[r * c + k] - mean) * (pre[r * c + k] - mean);
    const double sd = std::sqrt(var / static_cast<double>(rows));
    if (sd > 1e-12) fit.factor[k] = 1.0 / sd;
    fit.mean[k] = mean * fit.factor[k];
  }
  return fit;
}

void scale_rows(Tensor& w, const std::vector<double>& factor) {
  const std::size_t cols = w.size() / w.shape()[0];
  for (std::size_t r = 0; r < w.shape()[0]; ++r) {
    for (std::size_t c = 0; c < cols; ++c) w[r * cols + c] *= factor[r];
  }
}

void set_bias(Tensor& bias, const ChannelFit& fit) {
  for (std::size_t k = 0; k < bias.size(); ++k) bias[k] = -fit.mean[k];
}

}  // namespace

Tensor calibrate(TemporalConvParams<Tensor>& p, const Tensor& x, const std::function<Var(Var, const TemporalConvParams<Var>&)>& apply) {
  check_params(p);
  p.bias.fill(0.0);
  ChannelFit fit;
  {
    Tape tape;
    fit = fit_channels(apply(tape.constant(x), bind(tape, p, false)).value());
  }
  for (std::size_t k = 0; k < p.bias.size(); ++k) p.bias[k] = -fit.mean[k] / fit.factor[k];
  Tape tape;
  return apply(tape.constant(x), bind(tape, p, false)).value();
}

Tensor calibrate(DenseParams<Tensor>& p, const Tensor& x) {
  check_params(p);
  p.bias.fill(0.0);
  ChannelFit fit;
  {
    Tape tape;
    fit = fit_channels(dense(tape.constant(x), bind(tape, p, false)).value());
  }
  for (std::size_t k = 0; k < p.bias.size(); ++k) p.bias[k] = -fit.mean[k] / fit.factor[k];
  Tape tape;
  return dense(tape.constant(x), bind(tape, p, false)).value();
}

Tensor calibrate(GraphConvParams<Tensor>& p, const Tensor& x, const Topology& topo) {
  check_params(p);
  ChannelFit fit;
  {
    Tape tape;
    fit = fit_channels(node_core(tape.constant(x), topo, bind(tape, p, false)).value());
  }
  scale_rows(p.w_r, fit.factor);
  scale_rows(p.w_p, fit.factor);
  scale_rows(p.w_c, fit.factor);
  set_bias(p.bias, fit);
  Tape tape;
  return node_graph_conv(tape.constant(x), topo, bind(tape, p, false)).value();
}

Tensor calibrate(EdgeGraphConvParams<Tensor>& p, const Tensor& x, const Tensor& lengths, const Topology& topo) {
  check_params(p);
  if (topo.bones() > 0) {
    Tape tape;
    const auto bound = bind(tape, p, false);
    check_edge_inputs(tape.constant(x), tape.constant(lengths), topo, bound);
    const ChannelFit fit = fit_channels(edge_core(tape.constant(x), tape.constant(lengths), topo, bound).value());
    scale_rows(p.w_minus, fit.factor);
    scale_rows(p.w_plus, fit.factor);
    scale_rows(p.w_e, fit.factor);
    set_bias(p.edge_bias, fit);
  }
  ChannelFit fit;
  {
    Tape tape;
    const auto bound = bind(tape, p, false);
    const Var xv = tape.constant(x);
    check_edge_inputs(xv, tape.constant(lengths), topo, bound);
    Var e;
    if (topo.bones() > 0) e = sigmoid(edge_core(xv, tape.constant(lengths), topo, bound) + bound.edge_bias);
    fit = fit_channels(edge_node_core(xv, e, topo, bound).value());
  }
  scale_rows(p.w_r, fit.factor);
  scale_rows(p.w_p, fit.factor);
  scale_rows(p.w_c, fit.factor);
  set_bias(p.node_bias, fit);
  Tape tape;
  return edge_node_graph_conv(tape.constant(x), tape.constant(lengths), topo, bind(tape, p, false)).value();
}

std::string to_string(UpVariant v) { return v == UpVariant::upsample ? "upsample" : "transposed"; }

UpVariant parse_up_variant(std::string_view s) {
  if (s == "upsample") return UpVariant::upsample;
  if (s == "transposed") return UpVariant::transposed;
  throw Error("unknown up variant '" + std::string(s) + "' (expected upsample or transposed)");
}

Var temporal_down(Var x, const TemporalConvParams<Var>& p) {
  const std::size_t r = rank_of(x, 3, "temporal_down");
  check_channels(x, Tensor({1, p.kernel.shape()[1]}), "temporal_down");
  const std::size_t frames = x.shape()[r - 3];
  if (frames % 2 != 0) {
    throw ShapeError("temporal_down: frame count " + std::to_string(frames) + " is odd");
  }
  const Var y = conv1d(permute(x, to_time_last(r)), p.kernel, p.bias, 2, 1);
  return permute(y, from_time_last(r));
}

Var temporal_up(Var x, const TemporalConvParams<Var>& p, UpVariant variant) {
  const std::size_t r = rank_of(x, 3, "temporal_up");
  check_channels(x, Tensor({1, p.kernel.shape()[1]}), "temporal_up");
  const Var t = permute(x, to_time_last(r));
  const Var y = variant == UpVariant::upsample ? conv1d(upsample_nearest(t, 2), p.kernel, p.bias, 1, 1)
                                               : transposed_conv1d(t, p.kernel, p.bias, 2, 1, 1);
  return permute(y, from_time_last(r));
}

Var dense(Var x, const DenseParams<Var>& p) {
  check_channels(x, p.weight.value(), "dense");
  if (x.shape().size() == 1) {
    return reshape(linear(reshape(x, {1, x.shape()[0]}), p.weight) + p.bias, {p.weight.shape()[0]});
  }
  return linear(x, p.weight) + p.bias;
}

}  // namespace mrt
