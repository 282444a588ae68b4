#pragma once

// Encoder, length-conditioned decoder and discriminator.
//
//   encode:       [graph conv -> temporal down] x 3           T x N x 3 -> T/8 x N x d_z
//   decode:       [edge graph conv -> temporal up] x 3, linear  T/8 x N x d_z -> T x N x 3
//   discriminate: [edge graph conv -> temporal down] x 3, dense  T x N x 3 -> score
//
// All three accept optional leading batch dims. Lengths are one vector per
// call, in topology bone order.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mrt/error.hpp"
#include "mrt/layers.hpp"
#include "mrt/skeleton.hpp"

namespace mrt {

// T is not a positive multiple of 8.
class FrameCountError : public ShapeError {
 public:
  using ShapeError::ShapeError;
};

struct HyperParams {
  std::array<std::size_t, 3> channels{16, 32, 64};
  std::size_t latent_dim = 32;
  std::size_t frames = 32;
  UpVariant variant = UpVariant::upsample;

  void validate() const;  // throws FrameCountError / ShapeError
  friend bool operator==(const HyperParams&, const HyperParams&) = default;
};

void check_frame_count(std::size_t frames);

template <typename T>
struct EncoderParams {
  std::array<GraphConvParams<T>, 3> graph;
  std::array<TemporalConvParams<T>, 3> down;

  template <typename Self, typename F>
  static void visit(Self& s, F&& f) {
    for (std::size_t i = 0; i < 3; ++i) {
      visit_nested("graph" + std::to_string(i), s.graph[i], f);
      visit_nested("down" + std::to_string(i), s.down[i], f);
    }
  }
};

template <typename T>
struct DecoderParams {
  std::array<EdgeGraphConvParams<T>, 3> graph;
  std::array<TemporalConvParams<T>, 3> up;
  DenseParams<T> head;  // per-node c1 -> 3

  template <typename Self, typename F>
  static void visit(Self& s, F&& f) {
    for (std::size_t i = 0; i < 3; ++i) {
      visit_nested("graph" + std::to_string(i), s.graph[i], f);
      visit_nested("up" + std::to_string(i), s.up[i], f);
    }
    visit_nested("head", s.head, f);
  }
};

template <typename T>
struct DiscriminatorParams {
  std::array<EdgeGraphConvParams<T>, 3> graph;
  std::array<TemporalConvParams<T>, 3> down;
  DenseParams<T> head;  // flattened (T/8) x N x c3 -> 1

  template <typename Self, typename F>
  static void visit(Self& s, F&& f) {
    for (std::size_t i = 0; i < 3; ++i) {
      visit_nested("graph" + std::to_string(i), s.graph[i], f);
      visit_nested("down" + std::to_string(i), s.down[i], f);
    }
    visit_nested("head", s.head, f);
  }
};

// Generator (shared encoder + decoder) and discriminator.
template <typename T>
struct ModelParams {
  EncoderParams<T> enc;
  DecoderParams<T> dec;
  DiscriminatorParams<T> disc;

  template <typename Self, typename F>
  static void visit(Self& s, F&& f) {
    visit_nested("enc", s.enc, f);
    visit_nested("dec", s.dec, f);
    visit_nested("disc", s.disc, f);
  }
};

// Uniform in +-1/sqrt(fan_in), zero biases; deterministic given seed.
ModelParams<Tensor> init_params(const HyperParams& hyper, const Topology& topo, std::uint64_t seed);

// Checks that every layer's shapes chain from input to output.
void check_model(const ModelParams<Tensor>& params, const HyperParams& hyper, const Topology& topo);

// Calibrates every layer in order (see layers.hpp) on the reference motion
// x [..., T, N, 3] and lengths: encoder on x, decoder on the calibrated
// encoder's latent, discriminator on x.
void calibrate(ModelParams<Tensor>& params, const Tensor& x, const Tensor& lengths, const Topology& topo,
               UpVariant variant);

std::size_t parameter_count(const ModelParams<Tensor>& params);

// x: [..., T, N, 3] root-centered positions. Returns [..., T/8, N, d_z].
Var encode(Var x, const Topology& topo, const EncoderParams<Var>& enc);
// z: [..., T/8, N, d_z]; lengths: [bones]. Returns [..., T, N, 3] with the
// root joint at the origin in every frame.
Var decode(Var z, Var lengths, const Topology& topo, const DecoderParams<Var>& dec, UpVariant variant);
// x: [..., T, N, 3]. Returns scores shaped [...] (a scalar without batch dims).
Var discriminate(Var x, Var lengths, const Topology& topo, const DiscriminatorParams<Var>& disc);

// Root-centered motion tensor [T, N, 3] and back.
Tensor motion_to_tensor(const Motion& m);
Motion tensor_to_motion(const Tensor& t, double frame_rate);
Tensor lengths_tensor(const std::vector<double>& lengths);

// decode(encode(root_center(x_a)), l_b) with the root trajectory of x_a put
// back. x_a.frame_count must equal a multiple of 8.
Motion translate(const Motion& x_a, const std::vector<double>& lengths_b, const Topology& topo,
                 const HyperParams& hyper, const ModelParams<Tensor>& params);

// ---------------------------------------------------------------------------
// Checkpoints: "MRTCKPT1", a u64 header length, a JSON header (hyper,
// topology, string metadata, tensor names and shapes), then every tensor's
// doubles in header order, little-endian.

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  HyperParams hyper;
  std::vector<int> parent;
  std::map<std::string, std::string> meta;
  std::vector<NamedTensor> tensors;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Flatten / restore the model parameters under their visit() names.
void append_params(std::vector<NamedTensor>& out, const std::string& prefix, const ModelParams<Tensor>& params);
ModelParams<Tensor> extract_params(const Checkpoint& ckpt, const std::string& prefix);

}  // namespace mrt
