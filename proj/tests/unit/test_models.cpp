#include <algorithm>
#include <cstring>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "mrt/error.hpp"
#include "mrt/models.hpp"
#include "test_util.hpp"

using namespace mrt;
using namespace mrt::test;

namespace {

HyperParams small_hyper(std::size_t frames = 8) {
  HyperParams h;
  h.channels = {4, 4, 4};
  h.latent_dim = 4;
  h.frames = frames;
  return h;
}

Topology chain(std::size_t n) {
  std::vector<int> parent{-1};
  for (std::size_t i = 1; i < n; ++i) parent.push_back(static_cast<int>(i - 1));
  return Topology::from_parents(parent);
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("mrt_models_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

Tensor slice0(const Tensor& batched, std::size_t i) {
  Shape s(batched.shape().begin() + 1, batched.shape().end());
  const std::size_t n = batched.size() / batched.shape()[0];
  Tensor out(s);
  std::copy(batched.data().begin() + static_cast<std::ptrdiff_t>(i * n),
            batched.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * n), out.data().begin());
  return out;
}

}  // namespace

TEST_CASE("init_params is deterministic, bounded and passes the shape validator") {
  const Topology topo = chain(5);
  const HyperParams h = small_hyper();
  const auto a = init_params(h, topo, 3);
  const auto b = init_params(h, topo, 3);
  const auto c = init_params(h, topo, 4);
  std::vector<Tensor> fa = flatten(a), fb = flatten(b), fc = flatten(c);
  REQUIRE(fa.size() == fb.size());
  bool differs = false;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    CHECK(fa[i] == fb[i]);
    differs = differs || !(fa[i] == fc[i]);
  }
  CHECK(differs);
  CHECK_NOTHROW(check_model(a, h, topo));

  HyperParams wide;
  wide.channels = {100, 8, 8};
  const auto w = init_params(wide, topo, 1);
  for (double v : w.enc.graph[1].w_r.data()) CHECK(std::abs(v) <= 0.1);
  for (double v : w.enc.graph[1].bias.data()) CHECK(v == 0.0);

  auto broken = a;
  broken.dec.up[1].kernel = Tensor({4, 3, 3});
  CHECK_THROWS_AS(check_model(broken, h, topo), ShapeError);
  CHECK_THROWS_AS(check_model(a, small_hyper(16), topo), ShapeError);
  CHECK(parameter_count(a) > 0);
}

TEST_CASE("shape contract over frame and joint counts") {
  std::mt19937_64 gen(5);
  for (std::size_t t : {8u, 16u, 32u}) {
    for (std::size_t n : {5u, 8u, 15u}) {
      const Topology topo = random_tree(gen, n);
      const HyperParams h = small_hyper(t);
      const auto p = init_params(h, topo, 1);
      Tape tape;
      const auto enc = bind(tape, p.enc, false);
      const auto dec = bind(tape, p.dec, false);
      const auto disc = bind(tape, p.disc, false);
      const Var x = tape.constant(random_tensor(gen, {t, n, 3}));
      const Var l = tape.constant(random_tensor(gen, {n - 1}, 0.2, 1.0));
      const Var z = encode(x, topo, enc);
      CHECK(z.shape() == Shape{t / 8, n, 4});
      CHECK(decode(z, l, topo, dec, UpVariant::upsample).shape() == Shape{t, n, 3});
      CHECK(discriminate(x, l, topo, disc).shape() == Shape{});
    }
  }
  HyperParams h = small_hyper(32);
  h.latent_dim = 16;
  const Topology topo = chain(8);
  Tape tape;
  const auto enc = bind(tape, init_params(h, topo, 1).enc, false);
  CHECK(encode(tape.constant(Tensor({32, 8, 3})), topo, enc).shape() == Shape{4, 8, 16});
}

TEST_CASE("non-divisible frame counts raise FrameCountError") {
  const Topology topo = chain(5);
  for (std::size_t bad : {0u, 7u, 12u, 20u}) {
    HyperParams h = small_hyper(bad);
    CHECK_THROWS_AS(h.validate(), FrameCountError);
    CHECK_THROWS_AS(check_frame_count(bad), FrameCountError);
  }
  const auto p = init_params(small_hyper(), topo, 1);
  Tape tape;
  const auto enc = bind(tape, p.enc, false);
  const auto disc = bind(tape, p.disc, false);
  const Var l = tape.constant(Tensor({4}, 1.0));
  for (std::size_t bad : {7u, 12u}) {
    const Var x = tape.constant(Tensor({bad, 5, 3}));
    CHECK_THROWS_AS(encode(x, topo, enc), FrameCountError);
    CHECK_THROWS_AS(discriminate(x, l, topo, disc), FrameCountError);
  }
  CHECK_THROWS_WITH_AS(encode(tape.constant(Tensor({12, 5, 3})), topo, enc),
                       doctest::Contains("T=12"), FrameCountError);
  CHECK_THROWS_AS(encode(tape.constant(Tensor({8, 4, 3})), topo, enc), ShapeError);
}

TEST_CASE("latent is invariant to a uniform translation of the input motion") {
  std::mt19937_64 gen(9);
  const Topology topo = chain(5);
  Motion m(8, 5, 30.0);
  for (double& v : m.positions) v = std::uniform_real_distribution<double>(-1.0, 1.0)(gen);
  Motion shifted = m;
  for (std::size_t t = 0; t < 8; ++t) {
    for (std::size_t j = 0; j < 5; ++j) shifted.set_position(t, j, m.position(t, j) + Vec3(3.0, -2.0, 0.5));
  }
  const auto p = init_params(small_hyper(), topo, 2);
  Tape tape;
  const auto enc = bind(tape, p.enc, false);
  const Tensor za = encode(tape.constant(motion_to_tensor(m)), topo, enc).value();
  const Tensor zb = encode(tape.constant(motion_to_tensor(shifted)), topo, enc).value();
  CHECK(max_abs_diff(za, zb) <= 1e-12);
}

TEST_CASE("decode puts the root at the origin and depends on the lengths") {
  std::mt19937_64 gen(4);
  for (UpVariant v : {UpVariant::upsample, UpVariant::transposed}) {
    const Topology topo = random_tree(gen, 6);
    HyperParams h = small_hyper(16);
    h.variant = v;
    const auto p = init_params(h, topo, 8);
    Tape tape;
    const auto dec = bind(tape, p.dec, false);
    const Var z = tape.constant(random_tensor(gen, {2, 6, 4}));
    const Tensor l = random_tensor(gen, {5}, 0.2, 1.0);
    Tensor l2 = l;
    for (double& x : l2.data()) x *= 2.0;
    const Tensor y = decode(z, tape.constant(l), topo, dec, v).value();
    const Tensor y2 = decode(z, tape.constant(l2), topo, dec, v).value();
    for (std::size_t t = 0; t < 16; ++t) {
      for (std::size_t c = 0; c < 3; ++c) CHECK(y.at({t, topo.root, c}) == 0.0);
    }
    CHECK(max_abs_diff(y, y2) > 1e-6);

    const auto disc = bind(tape, p.disc, false);
    const Var x = tape.constant(random_tensor(gen, {16, 6, 3}));
    CHECK(std::abs(discriminate(x, tape.constant(l), topo, disc).value().item() -
                   discriminate(x, tape.constant(l2), topo, disc).value().item()) > 1e-9);
  }
}

TEST_CASE("zero discriminator parameters score every input 0") {
  std::mt19937_64 gen(6);
  const Topology topo = chain(5);
  auto p = init_params(small_hyper(), topo, 1);
  DiscriminatorParams<Tensor>::visit(p.disc, [](const std::string&, Tensor& t) { t.fill(0.0); });
  Tape tape;
  const auto disc = bind(tape, p.disc, false);
  for (int i = 0; i < 5; ++i) {
    const Var x = tape.constant(random_tensor(gen, {8, 5, 3}, -3.0, 3.0));
    CHECK(discriminate(x, tape.constant(random_tensor(gen, {4}, 0.1, 2.0)), topo, disc).value().item() == 0.0);
  }
}

struct GradPoint {
  Topology topo;
  HyperParams hyper;
  ModelParams<Tensor> params;
  Tensor x, z, lengths;
};

// T=8, N=5, channels [4,4,4], d_z=4, calibrated so no sigmoid is saturated.
GradPoint grad_point(std::uint64_t seed, UpVariant variant) {
  std::mt19937_64 gen(seed);
  GradPoint g{random_tree(gen, 5), small_hyper(), {}, {}, {}, {}};
  g.hyper.variant = variant;
  g.params = init_params(g.hyper, g.topo, seed);
  g.x = random_tensor(gen, {8, 5, 3});
  g.lengths = random_tensor(gen, {4}, 0.2, 1.0);
  calibrate(g.params, g.x, g.lengths, g.topo, variant);
  Tape tape;
  g.z = encode(tape.constant(g.x), g.topo, bind(tape, g.params.enc, false)).value();
  return g;
}

TEST_CASE("model input gradients pass gradcheck, including lengths") {
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    for (UpVariant v : {UpVariant::upsample, UpVariant::transposed}) {
      const GradPoint g = grad_point(seed, v);
      CAPTURE(seed);
      {
        Probe probe;
        const auto r = gradcheck(
            [&](Tape& tape, std::span<const Var> in) { return probe(encode(in[0], g.topo, bind(tape, g.params.enc, false))); },
            {g.x});
        CHECK(r.max_rel_error <= 1e-5);
        worst = std::max(worst, r.max_rel_error);
      }
      {
        Probe probe;
        const auto r = gradcheck(
            [&](Tape& tape, std::span<const Var> in) {
              return probe(decode(in[0], in[1], g.topo, bind(tape, g.params.dec, false), v));
            },
            {g.z, g.lengths});
        CHECK(r.max_rel_error <= 1e-5);
        worst = std::max(worst, r.max_rel_error);
      }
      {
        Probe probe;
        const auto r = gradcheck(
            [&](Tape& tape, std::span<const Var> in) {
              return probe(discriminate(in[0], in[1], g.topo, bind(tape, g.params.disc, false)));
            },
            {g.x, g.lengths});
        CHECK(r.max_rel_error <= 1e-5);
        worst = std::max(worst, r.max_rel_error);
      }
    }
  }
  MESSAGE("worst model input gradcheck relative error " << worst);
}

// Beyond the input-gradient contract above. Some parameter components nearly
// cancel, which puts them closer to the eps=1e-6 rounding floor, so the bound
// here is 1e-4.
TEST_CASE("model parameter gradients match central differences") {
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    for (UpVariant v : {UpVariant::upsample, UpVariant::transposed}) {
      const GradPoint g = grad_point(seed, v);
      CAPTURE(seed);
      {
        std::vector<Tensor> in{g.x};
        append(in, flatten(g.params.enc));
        Probe probe;
        const auto r = gradcheck(
            [&](Tape&, std::span<const Var> vars) {
              std::size_t k = 1;
              return probe(encode(vars[0], g.topo, unflatten<EncoderParams>(vars, k)));
            },
            in);
        CAPTURE(r.worst_input);
        CHECK(r.max_rel_error <= 1e-4);
        worst = std::max(worst, r.max_rel_error);
      }
      {
        std::vector<Tensor> in{g.z, g.lengths};
        append(in, flatten(g.params.dec));
        Probe probe;
        const auto r = gradcheck(
            [&](Tape&, std::span<const Var> vars) {
              std::size_t k = 2;
              return probe(decode(vars[0], vars[1], g.topo, unflatten<DecoderParams>(vars, k), v));
            },
            in);
        CHECK(r.max_rel_error <= 1e-4);
        worst = std::max(worst, r.max_rel_error);
      }
      {
        std::vector<Tensor> in{g.x, g.lengths};
        append(in, flatten(g.params.disc));
        Probe probe;
        const auto r = gradcheck(
            [&](Tape&, std::span<const Var> vars) {
              std::size_t k = 2;
              return probe(discriminate(vars[0], vars[1], g.topo, unflatten<DiscriminatorParams>(vars, k)));
            },
            in);
        CHECK(r.max_rel_error <= 1e-4);
        worst = std::max(worst, r.max_rel_error);
      }
    }
  }
  MESSAGE("worst model parameter gradcheck relative error " << worst);
}

TEST_CASE("translate is decode after encode with the source root trajectory") {
  std::mt19937_64 gen(12);
  const Topology topo = chain(5);
  const HyperParams h = small_hyper(16);
  const auto p = init_params(h, topo, 5);
  Motion m(16, 5, 30.0);
  for (double& v : m.positions) v = std::uniform_real_distribution<double>(-1.0, 1.0)(gen);
  const std::vector<double> lb{0.3, 0.5, 0.4, 0.2};

  const Motion out = translate(m, lb, topo, h, p);
  REQUIRE(out.frame_count == 16);
  REQUIRE(out.joint_count == 5);

  Tape tape;
  const Tensor y = decode(encode(tape.constant(motion_to_tensor(m)), topo, bind(tape, p.enc, false)),
                          tape.constant(lengths_tensor(lb)), topo, bind(tape, p.dec, false), h.variant)
                       .value();
  for (std::size_t t = 0; t < 16; ++t) {
    const Vec3 root = m.position(t, 0);
    CHECK(out.position(t, 0) == root);
    for (std::size_t j = 0; j < 5; ++j) {
      for (std::size_t c = 0; c < 3; ++c) CHECK(out.position(t, j)[c] == y.at({t, j, c}) + root[c]);
    }
  }
  CHECK_THROWS_AS(translate(m, {0.3, 0.5}, topo, h, p), ShapeError);
}

TEST_CASE("batched evaluation matches per-sample evaluation") {
  std::mt19937_64 gen(14);
  const Topology topo = random_tree(gen, 6);
  const HyperParams h = small_hyper(16);
  const auto p = init_params(h, topo, 2);
  Tape tape;
  const auto enc = bind(tape, p.enc, false);
  const auto dec = bind(tape, p.dec, false);
  const auto disc = bind(tape, p.disc, false);
  const Tensor xb = random_tensor(gen, {3, 16, 6, 3});
  const Var l = tape.constant(random_tensor(gen, {5}, 0.2, 1.0));
  const Tensor zb = encode(tape.constant(xb), topo, enc).value();
  const Tensor yb = decode(tape.constant(zb), l, topo, dec, h.variant).value();
  const Tensor sb = discriminate(tape.constant(xb), l, topo, disc).value();
  REQUIRE(sb.shape() == Shape{3});
  for (std::size_t i = 0; i < 3; ++i) {
    const Tensor x = slice0(xb, i);
    const Tensor z = encode(tape.constant(x), topo, enc).value();
    CHECK(max_abs_diff(z, slice0(zb, i)) <= 1e-13);
    CHECK(max_abs_diff(decode(tape.constant(z), l, topo, dec, h.variant).value(), slice0(yb, i)) <= 1e-13);
    CHECK(std::abs(discriminate(tape.constant(x), l, topo, disc).value().item() - sb[i]) <= 1e-13);
  }
}

TEST_CASE("encode and decode are equivariant to joint relabelling") {
  std::mt19937_64 gen(15);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t n = 5 + gen() % 4;
    const Topology topo = random_tree(gen, n);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), gen);
    const Topology ptopo = Topology::from_parents(permute_parents(parents_of(topo), perm));
    std::vector<double> len_by_child(n, 0.0), plen(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) len_by_child[j] = 0.2 + 0.05 * static_cast<double>(j);
    for (std::size_t j = 0; j < n; ++j) plen[perm[j]] = len_by_child[j];

    const HyperParams h = small_hyper();
    const auto p = init_params(h, topo, 31);
    Tape tape;
    const auto enc = bind(tape, p.enc, false);
    const auto dec = bind(tape, p.dec, false);
    const Tensor x = random_tensor(gen, {8, n, 3});
    const Tensor z = encode(tape.constant(x), topo, enc).value();
    const Tensor pz = encode(tape.constant(permute_joints(x, perm)), ptopo, enc).value();
    CHECK(max_abs_diff(permute_joints(z, perm), pz) <= 1e-12);
    const Tensor y = decode(tape.constant(z), tape.constant(lengths_for(topo, len_by_child)), topo, dec, h.variant).value();
    const Tensor py = decode(tape.constant(pz), tape.constant(lengths_for(ptopo, plen)), ptopo, dec, h.variant).value();
    CHECK(max_abs_diff(permute_joints(y, perm), py) <= 1e-12);
  }
}

TEST_CASE("checkpoint round trip is bitwise and corruption is reported") {
  const auto dir = temp_dir("ckpt");
  const Topology topo = chain(5);
  Checkpoint ck;
  ck.hyper = small_hyper(16);
  ck.hyper.variant = UpVariant::transposed;
  ck.parent = parents_of(topo);
  ck.meta = {{"seed", "9"}, {"step", "12"}};
  const auto p = init_params(ck.hyper, topo, 9);
  append_params(ck.tensors, "model", p);
  ck.tensors.push_back({"extra", Tensor({2}, std::vector<double>{std::nextafter(1.0, 2.0), -0.0})});
  const auto path = dir / "a.ckpt";
  write_checkpoint(path, ck);
  CHECK_FALSE(std::filesystem::exists(dir / "a.ckpt.tmp"));

  const Checkpoint back = read_checkpoint(path);
  CHECK(back.hyper == ck.hyper);
  CHECK(back.parent == ck.parent);
  CHECK(back.meta == ck.meta);
  REQUIRE(back.tensors.size() == ck.tensors.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    CHECK(back.tensors[i].name == ck.tensors[i].name);
    CHECK(back.tensors[i].value.shape() == ck.tensors[i].value.shape());
    CHECK(std::memcmp(back.tensors[i].value.ptr(), ck.tensors[i].value.ptr(),
                      ck.tensors[i].value.size() * sizeof(double)) == 0);
  }
  const auto q = extract_params(back, "model");
  CHECK_NOTHROW(check_model(q, back.hyper, topo));
  CHECK_THROWS_AS(extract_params(back, "other"), Error);

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  const auto write = [&](const std::string& name, const std::string& content) {
    const auto f = dir / name;
    std::ofstream(f, std::ios::binary) << content;
    return f;
  };
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_WITH_AS(read_checkpoint(write("m.ckpt", bad_magic)), doctest::Contains("bad magic"), IoError);
  CHECK_THROWS_WITH_AS(read_checkpoint(write("t.ckpt", bytes.substr(0, bytes.size() - 5))),
                       doctest::Contains("truncated payload"), IoError);
  CHECK_THROWS_AS(read_checkpoint(write("h.ckpt", bytes.substr(0, 40))), IoError);
  CHECK_THROWS_WITH_AS(read_checkpoint(write("x.ckpt", bytes + "z")), doctest::Contains("trailing"), IoError);
  CHECK_THROWS_AS(read_checkpoint(dir / "missing.ckpt"), IoError);
  std::filesystem::remove_all(dir);
}
