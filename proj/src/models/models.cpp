#include "mrt/models.hpp"

#include <cstring>

namespace mrt {

void check_frame_count(std::size_t frames) {
  if (frames == 0 || frames % 8 != 0) {
    throw FrameCountError("frame count T=" + std::to_string(frames) +
                          " is not a positive multiple of 8 (three stride-2 stages)");
  }
}

void HyperParams::validate() const {
  check_frame_count(frames);
  for (std::size_t c : channels) {
    if (c < 1) throw ShapeError("hyperparameters: channel widths must be at least 1");
  }
  if (latent_dim < 1) throw ShapeError("hyperparameters: latent_dim must be at least 1");
}

ModelParams<Tensor> init_params(const HyperParams& h, const Topology& topo, std::uint64_t seed) {
  h.validate();
  Rng rng(seed);
  const auto [c1, c2, c3] = h.channels;
  ModelParams<Tensor> p;
  p.enc.graph[0] = make_graph_conv(3, c1, rng);
  p.enc.down[0] = make_temporal_conv(c1, c1, rng);
  p.enc.graph[1] = make_graph_conv(c1, c2, rng);
  p.enc.down[1] = make_temporal_conv(c2, c2, rng);
  p.enc.graph[2] = make_graph_conv(c2, c3, rng);
  p.enc.down[2] = make_temporal_conv(c3, h.latent_dim, rng);

  p.dec.graph[0] = make_edge_graph_conv(h.latent_dim, c3, rng);
  p.dec.up[0] = make_temporal_conv(c3, c3, rng);
  p.dec.graph[1] = make_edge_graph_conv(c3, c2, rng);
  p.dec.up[1] = make_temporal_conv(c2, c2, rng);
  p.dec.graph[2] = make_edge_graph_conv(c2, c1, rng);
  p.dec.up[2] = make_temporal_conv(c1, c1, rng);
  p.dec.head = make_dense(c1, 3, rng);

  p.disc.graph[0] = make_edge_graph_conv(3, c1, rng);
  p.disc.down[0] = make_temporal_conv(c1, c1, rng);
  p.disc.graph[1] = make_edge_graph_conv(c1, c2, rng);
  p.disc.down[1] = make_temporal_conv(c2, c2, rng);
  p.disc.graph[2] = make_edge_graph_conv(c2, c3, rng);
  p.disc.down[2] = make_temporal_conv(c3, c3, rng);
  p.disc.head = make_dense((h.frames / 8) * topo.joints * c3, 1, rng);
  return p;
}

void check_model(const ModelParams<Tensor>& params, const HyperParams& hyper, const Topology& topo) {
  hyper.validate();
  for (const auto& g : params.enc.graph) check_params(g);
  for (const auto& g : params.dec.graph) check_params(g);
  for (const auto& g : params.disc.graph) check_params(g);
  for (const auto& t : params.enc.down) check_params(t);
  for (const auto& t : params.dec.up) check_params(t);
  for (const auto& t : params.disc.down) check_params(t);
  check_params(params.dec.head);
  check_params(params.disc.head);

  // The reference layout for this hyper fixes every shape.
  const ModelParams<Tensor> ref = init_params(hyper, topo, 0);
  std::vector<std::pair<std::string, Shape>> want;
  ModelParams<Tensor>::visit(ref, [&](const std::string& name, const Tensor& t) { want.emplace_back(name, t.shape()); });
  std::size_t k = 0;
  ModelParams<Tensor>::visit(params, [&](const std::string& name, const Tensor& t) {
    if (t.shape() != want[k].second) {
      throw ShapeError("model parameter " + name + " has shape " + shape_str(t.shape()) + ", expected " +
                       shape_str(want[k].second));
    }
    ++k;
  });
}

void calibrate(ModelParams<Tensor>& params, const Tensor& x, const Tensor& lengths, const Topology& topo,
               UpVariant variant) {
  Tensor h = x;
  for (std::size_t i = 0; i < 3; ++i) {
    h = calibrate(params.enc.down[i], calibrate(params.enc.graph[i], h, topo), temporal_down);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    h = calibrate(params.dec.up[i], calibrate(params.dec.graph[i], h, lengths, topo),
                  [variant](Var v, const TemporalConvParams<Var>& p) { return temporal_up(v, p, variant); });
  }
  calibrate(params.dec.head, h);
  h = x;
  for (std::size_t i = 0; i < 3; ++i) {
    h = calibrate(params.disc.down[i], calibrate(params.disc.graph[i], h, lengths, topo), temporal_down);
  }
  const Shape& s = h.shape();
  Shape flat(s.begin(), s.end() - 3);
  flat.push_back(s[s.size() - 3] * s[s.size() - 2] * s[s.size() - 1]);
  calibrate(params.disc.head, h.reshaped(flat));
}

std::size_t parameter_count(const ModelParams<Tensor>& params) {
  std::size_t n = 0;
  ModelParams<Tensor>::visit(params, [&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

namespace {

void check_motion_input(Var x, const Topology& topo, std::size_t channels, const char* what) {
  const Shape& s = x.shape();
  if (s.size() < 3 || s[s.size() - 2] != topo.joints || s.back() != channels) {
    throw ShapeError(std::string(what) + ": expected [..., T, " + std::to_string(topo.joints) + ", " +
                     std::to_string(channels) + "], got " + shape_str(s));
  }
}

}  // namespace

Var encode(Var x, const Topology& topo, const EncoderParams<Var>& enc) {
  check_motion_input(x, topo, 3, "encode");
  check_frame_count(x.shape()[x.shape().size() - 3]);
  Var h = x;
  for (std::size_t i = 0; i < 3; ++i) h = temporal_down(node_graph_conv(h, topo, enc.graph[i]), enc.down[i]);
  return h;
}

Var decode(Var z, Var lengths, const Topology& topo, const DecoderParams<Var>& dec, UpVariant variant) {
  check_motion_input(z, topo, dec.graph[0].w_r.shape()[1], "decode");
  Var h = z;
  for (std::size_t i = 0; i < 3; ++i) h = temporal_up(edge_node_graph_conv(h, lengths, topo, dec.graph[i]), dec.up[i], variant);
  Tensor mask({topo.joints, 3}, 1.0);
  for (std::size_t c = 0; c < 3; ++c) mask.at({topo.root, c}) = 0.0;
  return dense(h, dec.head) * z.tape()->constant(std::move(mask));
}

Var discriminate(Var x, Var lengths, const Topology& topo, const DiscriminatorParams<Var>& disc) {
  check_motion_input(x, topo, 3, "discriminate");
  check_frame_count(x.shape()[x.shape().size() - 3]);
  Var h = x;
  for (std::size_t i = 0; i < 3; ++i) h = temporal_down(edge_node_graph_conv(h, lengths, topo, disc.graph[i]), disc.down[i]);
  const Shape& s = h.shape();
  Shape lead(s.begin(), s.end() - 3);
  Shape flat = lead;
  flat.push_back(s[s.size() - 3] * s[s.size() - 2] * s[s.size() - 1]);
  const Var score = dense(reshape(h, flat), disc.head);
  return reshape(score, lead);
}

Tensor motion_to_tensor(const Motion& m) {
  const Motion c = root_center(m);
  return Tensor({m.frame_count, m.joint_count, 3}, c.positions);
}

Motion tensor_to_motion(const Tensor& t, double frame_rate) {
  if (t.rank() != 3 || t.shape()[2] != 3) throw ShapeError("tensor_to_motion: expected [T, N, 3], got " + shape_str(t.shape()));
  Motion m(t.shape()[0], t.shape()[1], frame_rate);
  std::memcpy(m.positions.data(), t.ptr(), t.size() * sizeof(double));
  return m;
}

Tensor lengths_tensor(const std::vector<double>& lengths) { return Tensor({lengths.size()}, lengths); }

Motion translate(const Motion& x_a, const std::vector<double>& lengths_b, const Topology& topo,
                 const HyperParams& hyper, const ModelParams<Tensor>& params) {
  if (x_a.joint_count != topo.joints) throw ShapeError("translate: motion joint count does not match topology");
  if (lengths_b.size() != topo.bones()) throw ShapeError("translate: expected one length per bone");
  Tape tape;
  const auto enc = bind(tape, params.enc, false);
  const auto dec = bind(tape, params.dec, false);
  const Var x = tape.constant(motion_to_tensor(x_a));
  const Var l = tape.constant(lengths_tensor(lengths_b));
  Motion out = tensor_to_motion(decode(encode(x, topo, enc), l, topo, dec, hyper.variant).value(), x_a.frame_rate);
  for (std::size_t t = 0; t < out.frame_count; ++t) {
    const Vec3 root = x_a.position(t, topo.root);
    for (std::size_t j = 0; j < out.joint_count; ++j) out.set_position(t, j, out.position(t, j) + root);
  }
  return out;
}

}  // namespace mrt
