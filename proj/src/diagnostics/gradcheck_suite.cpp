#include "mrt/gradcheck_suite.hpp"

#include <algorithm>
#include <map>
#include <random>

#include "mrt/layers.hpp"
#include "mrt/models.hpp"
#include "mrt/objectives.hpp"

namespace mrt {

namespace {

Tensor uniform(std::mt19937_64& gen, Shape shape, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = u(gen);
  return t;
}

// Values at least 0.1 away from `from`, so difference losses have no
// vanishing derivative components.
Tensor away_from(std::mt19937_64& gen, const Tensor& from) {
  Tensor t = uniform(gen, from.shape(), 0.1, 1.0);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = from[i] + (gen() % 2 ? t[i] : -t[i]);
  return t;
}

Topology random_tree(std::mt19937_64& gen, std::size_t n) {
  std::vector<int> parent{kNoParent};
  for (std::size_t i = 1; i < n; ++i) parent.push_back(static_cast<int>(gen() % i));
  return Topology::from_parents(parent);
}

template <template <typename> class P>
std::vector<Tensor> with_params(std::vector<Tensor> in, const P<Tensor>& p) {
  const std::vector<Tensor> flat = flatten(p);
  in.insert(in.end(), flat.begin(), flat.end());
  return in;
}

class Recorder {
 public:
  void add(const std::string& name, double err) {
    if (!worst_.count(name)) order_.push_back(name);
    worst_[name] = std::max(worst_[name], err);
  }
  std::vector<GradcheckEntry> entries() const {
    std::vector<GradcheckEntry> out;
    for (const std::string& n : order_) out.push_back({n, worst_.at(n)});
    return out;
  }

 private:
  std::vector<std::string> order_;
  std::map<std::string, double> worst_;
};

void check_layers(std::mt19937_64& gen, Rng& rng, Recorder& rec) {
  const std::size_t t = 2 * (1 + gen() % 4);
  const std::size_t n = 2 + gen() % 5;
  const std::size_t cin = 1 + gen() % 4;
  const std::size_t cout = 1 + gen() % 4;
  const Topology topo = random_tree(gen, n);
  const Tensor x = uniform(gen, {t, n, cin}, -1.0, 1.0);
  const Tensor l = uniform(gen, {topo.bones()}, 0.2, 1.0);
  {
    CenteredProbe probe;
    rec.add("layer node_graph_conv", gradcheck(
                                         [&](Tape&, std::span<const Var> v) {
                                           std::size_t k = 1;
                                           return probe(node_graph_conv(v[0], topo, unflatten<GraphConvParams>(v, k)));
                                         },
                                         with_params({x}, make_graph_conv(cin, cout, rng)))
                                         .max_rel_error);
  }
  {
    CenteredProbe probe;
    rec.add("layer edge_node_graph_conv",
            gradcheck(
                [&](Tape&, std::span<const Var> v) {
                  std::size_t k = 2;
                  return probe(edge_node_graph_conv(v[0], v[1], topo, unflatten<EdgeGraphConvParams>(v, k)));
                },
                with_params({x, l}, make_edge_graph_conv(cin, cout, rng)))
                .max_rel_error);
  }
  const std::pair<const char*, int> temporal[] = {
      {"layer temporal_down", 0}, {"layer temporal_up (upsample)", 1}, {"layer temporal_up (transposed)", 2}};
  for (const auto& [name, which] : temporal) {
    CenteredProbe probe;
    rec.add(name, gradcheck(
                      [&, which = which](Tape&, std::span<const Var> v) {
                        std::size_t k = 1;
                        const auto p = unflatten<TemporalConvParams>(v, k);
                        if (which == 0) return probe(temporal_down(v[0], p));
                        return probe(temporal_up(v[0], p, which == 1 ? UpVariant::upsample : UpVariant::transposed));
                      },
                      with_params({x}, make_temporal_conv(cin, cout, rng)))
                      .max_rel_error);
  }
  {
    CenteredProbe probe;
    rec.add("layer dense", gradcheck(
                               [&](Tape&, std::span<const Var> v) {
                                 std::size_t k = 1;
                                 return probe(dense(v[0], unflatten<DenseParams>(v, k)));
                               },
                               with_params({x.reshaped({t * n * cin})}, make_dense(t * n * cin, cout, rng)))
                               .max_rel_error);
  }
}

void check_losses(std::mt19937_64& gen, Recorder& rec) {
  // Scores away from the LSGAN targets 0 and 1, for the same reason as
  // away_from.
  const Tensor real = uniform(gen, {4}, -1.5, -0.1);
  const Tensor fake = uniform(gen, {4}, -1.5, -0.1);
  const Tensor x = uniform(gen, {2, 8, 5, 3}, -1.0, 1.0);
  const Tensor y = away_from(gen, x);
  const Tensor za = uniform(gen, {2, 1, 5, 4}, 0.1, 1.0);
  const Tensor zb = away_from(gen, za);
  rec.add("loss discriminator",
          gradcheck([](Tape&, std::span<const Var> v) { return loss_discriminator(v[0], v[1]); }, {real, fake}).max_rel_error);
  rec.add("loss generator_adv",
          gradcheck([](Tape&, std::span<const Var> v) { return loss_generator_adv(v[0]); }, {fake}).max_rel_error);
  rec.add("loss cycle", gradcheck([](Tape&, std::span<const Var> v) { return loss_cycle(v[0], v[1]); }, {x, y}).max_rel_error);
  rec.add("loss vae",
          gradcheck([](Tape&, std::span<const Var> v) { return loss_vae(v[0], v[1], v[2], 0.01); }, {x, y, za}).max_rel_error);
  rec.add("loss latent_cycle",
          gradcheck([](Tape&, std::span<const Var> v) { return loss_latent_cycle(v[0], v[1]); }, {za, zb}).max_rel_error);
}

void check_composite(std::mt19937_64& gen, std::uint64_t seed, Recorder& rec) {
  std::vector<int> parent{kNoParent};
  for (std::size_t i = 1; i < 5; ++i) parent.push_back(static_cast<int>(gen() % i));
  const Topology topo = Topology::from_parents(parent);
  HyperParams h;
  h.channels = {4, 4, 4};
  h.latent_dim = 4;
  h.frames = 8;
  const Tensor x = uniform(gen, {8, 5, 3}, -1.0, 1.0);
  const Tensor l = uniform(gen, {topo.bones()}, 0.2, 1.0);
  for (UpVariant variant : {UpVariant::upsample, UpVariant::transposed}) {
    h.variant = variant;
    ModelParams<Tensor> params = init_params(h, topo, seed);
    calibrate(params, x, l, topo, variant);
    const std::string name = "composite encode-decode-loss (" + to_string(variant) + ")";
    rec.add(name, gradcheck(
                      [&](Tape& tape, std::span<const Var> v) {
                        const Var z = encode(v[0], topo, bind(tape, params.enc, false));
                        const Var rec_x = decode(z, v[1], topo, bind(tape, params.dec, false), variant);
                        return loss_vae(v[0], rec_x, z, 0.01);
                      },
                      {x, l})
                      .max_rel_error);
  }
}

}  // namespace

Var CenteredProbe::operator()(Var y) {
  if (!baseline_) baseline_ = y.value();
  std::mt19937_64 gen(0xC0FFEE);
  const Tensor weights = uniform(gen, y.shape(), 0.5, 1.5);
  return sum(mul(sub(y, y.tape()->constant(*baseline_)), y.tape()->constant(weights)));
}

std::vector<GradcheckEntry> gradcheck_suite(std::uint64_t seed, int trials) {
  std::mt19937_64 gen(seed);
  Rng rng(derive_seed(seed, 1));
  Recorder rec;
  for (int i = 0; i < trials; ++i) {
    check_layers(gen, rng, rec);
    check_losses(gen, rec);
    check_composite(gen, derive_seed(seed, 2 + static_cast<std::uint64_t>(i)), rec);
  }
  return rec.entries();
}

}  // namespace mrt
