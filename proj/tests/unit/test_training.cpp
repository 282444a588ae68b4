#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "mrt/error.hpp"
#include "mrt/training.hpp"
#include "test_util.hpp"

using namespace mrt;
using namespace mrt::test;

namespace {

Dataset small_dataset(std::size_t train_chars, std::size_t clips, std::size_t frames, std::uint64_t seed = 4) {
  const auto family = generate_character_family(canonical_skeleton(5), train_chars, 0.7, 1.3, seed);
  SynthesisOptions o;
  o.train_chars = train_chars;
  o.test_chars = 0;
  o.test_motions = 0;
  o.clips_per_train_char = clips;
  o.frames = frames;
  o.seed = seed;
  return synthesize_dataset(family, o);
}

TrainConfig small_config(Mode mode) {
  TrainConfig cfg;
  cfg.mode = mode;
  cfg.steps = 6;
  cfg.batch_size = 2;
  cfg.learning_rate = 1e-3;
  cfg.checkpoint_every = 3;
  cfg.hyper.channels = {4, 4, 4};
  cfg.hyper.latent_dim = 4;
  cfg.hyper.frames = 8;
  return cfg;
}

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("mrt_training_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

template <typename P>
std::vector<Tensor> snapshot(const P& params) {
  std::vector<Tensor> out;
  P::visit(params, [&](const std::string&, const Tensor& t) { out.push_back(t); });
  return out;
}

struct Fixture {
  Dataset data = small_dataset(2, 5, 12);
  Topology topo = dataset_topology(data);
};

}  // namespace

TEST_CASE("crop_or_pad") {
  Motion m(40, 2, 30.0);
  for (std::size_t t = 0; t < 40; ++t) {
    for (std::size_t j = 0; j < 2; ++j) m.set_position(t, j, {double(t), double(j), 1.0});
  }
  const Motion crop = crop_or_pad(m, 32, 5);
  REQUIRE(crop.frame_count == 32);
  for (std::size_t t = 0; t < 32; ++t) CHECK(crop.position(t, 1) == m.position(t + 5, 1));
  CHECK(crop_or_pad(m, 32, 8).position(31, 0) == m.position(39, 0));
  CHECK_THROWS_AS(crop_or_pad(m, 32, 9), Error);

  Motion short_clip(20, 2, 30.0);
  for (std::size_t t = 0; t < 20; ++t) short_clip.set_position(t, 0, {double(t), 0.0, 0.0});
  const Motion pad = crop_or_pad(short_clip, 32, 0);
  REQUIRE(pad.frame_count == 32);
  for (std::size_t t = 0; t < 32; ++t) CHECK(pad.position(t, 0)[0] == double(std::min<std::size_t>(t, 19)));
}

TEST_CASE("sample_pair_batch") {
  const Fixture f;
  const std::set<std::string> chars{f.data.characters[0].id, f.data.characters[1].id};
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng r1(s), r2(s);
    const PairBatch a = sample_pair_batch(f.data, 3, 8, r1);
    const PairBatch b = sample_pair_batch(f.data, 3, 8, r2);
    CHECK(a.char_a != a.char_b);
    CHECK(std::set<std::string>{a.char_a, a.char_b} == chars);
    CHECK(a.x_a == b.x_a);
    CHECK(a.x_b == b.x_b);
    CHECK(a.char_a == b.char_a);
    CHECK(a.x_a.shape() == Shape{3, 8, 5, 3});
    CHECK(a.l_a.shape() == Shape{f.topo.bones()});
    const Skeleton& sk = f.data.character(a.char_b).skeleton;
    for (std::size_t k = 0; k < f.topo.bones(); ++k) {
      CHECK(a.l_b[k] == sk.bone_length[bone_of_joint(f.topo.bone_child[k])]);
    }
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t t = 0; t < 8; ++t) CHECK(a.x_a.at({i, t, 0, 0}) == 0.0);  // root-centred
    }
  }
}

TEST_CASE("sample_pair_batch draws without replacement from a large enough pool") {
  const Dataset data = small_dataset(2, 4, 8);
  for (std::uint64_t s = 0; s < 10; ++s) {
    Rng rng(s);
    const PairBatch b = sample_pair_batch(data, 4, 8, rng);
    const std::size_t clip = 8 * 5 * 3;
    std::set<std::vector<double>> seen;
    for (std::size_t i = 0; i < 4; ++i) {
      const auto d = b.x_a.data().subspan(i * clip, clip);
      seen.insert(std::vector<double>(d.begin(), d.end()));
    }
    CHECK(seen.size() == 4);
  }
  Rng rng(1);
  CHECK(sample_pair_batch(data, 9, 8, rng).x_a.shape()[0] == 9);  // with replacement
  CHECK(sample_pair_batch(data, 2, 16, rng).x_b.shape()[1] == 16);  // padded
}

TEST_CASE("sample_pair_batch needs two train characters") {
  const Dataset data = small_dataset(1, 3, 8);
  Rng rng(0);
  CHECK_THROWS_AS(sample_pair_batch(data, 2, 8, rng), Error);
}

TEST_CASE("adam") {
  std::mt19937_64 gen(2);
  Tensor p = random_tensor(gen, {3, 2});
  const Tensor p0 = p;
  std::vector<Tensor*> ptrs{&p};
  AdamState s = make_adam_state(ptrs);
  const std::vector<Tensor> zero{Tensor({3, 2})};
  adam_update(ptrs, zero, s, 1e-2, 0.5, 0.999);
  CHECK(p == p0);
  CHECK(s.step == 1);

  // Constant gradient: every step moves by lr against the gradient's sign.
  std::vector<Tensor> g{Tensor({3, 2}, 0.3)};
  g[0][1] = -2.0;
  for (int i = 0; i < 200; ++i) {
    const Tensor before = p;
    adam_update(ptrs, g, s, 1e-3, 0.5, 0.999);
    if (i > 100) {
      CHECK(p[0] - before[0] == doctest::Approx(-1e-3).epsilon(1e-4));
      CHECK(p[1] - before[1] == doctest::Approx(1e-3).epsilon(1e-4));
    }
  }

  Tensor q = p0;
  Tensor r = p0;
  std::vector<Tensor*> qp{&q}, rp{&r};
  AdamState sq = make_adam_state(qp), sr = make_adam_state(rp);
  for (int i = 0; i < 10; ++i) {
    const std::vector<Tensor> gi{random_tensor(gen, {3, 2})};
    adam_update(qp, gi, sq, 1e-2, 0.5, 0.999);
    adam_update(rp, gi, sr, 1e-2, 0.5, 0.999);
  }
  CHECK(q == r);
  CHECK(sq.m[0] == sr.m[0]);
  CHECK(sq.v[0] == sr.v[0]);

  const std::vector<Tensor> bad{Tensor({2, 3})};
  CHECK_THROWS_AS(adam_update(qp, bad, sq, 1e-2, 0.5, 0.999), ShapeError);
  CHECK_THROWS_AS(adam_update(qp, {}, sq, 1e-2, 0.5, 0.999), ShapeError);
}

TEST_CASE("discriminator and generator updates are isolated") {
  const Fixture f;
  for (Mode mode : {Mode::cyclegan, Mode::unit}) {
    const TrainConfig cfg = small_config(mode);
    TrainState state = init_train_state(cfg, f.topo);
    Rng rng(3);
    const PairBatch batch = sample_pair_batch(f.data, 2, 8, rng);

    const auto enc0 = snapshot(state.params.enc), dec0 = snapshot(state.params.dec), disc0 = snapshot(state.params.disc);
    const double adv_d = discriminator_step(state, batch, f.topo, cfg);
    CHECK(snapshot(state.params.enc) == enc0);
    CHECK(snapshot(state.params.dec) == dec0);
    const auto disc1 = snapshot(state.params.disc);
    CHECK(disc1 != disc0);
    CHECK(state.disc.step == 1);
    CHECK(state.gen.step == 0);

    generator_step(state, batch, f.topo, cfg, adv_d);
    CHECK(snapshot(state.params.disc) == disc1);
    CHECK(snapshot(state.params.enc) != enc0);
    CHECK(snapshot(state.params.dec) != dec0);
    CHECK(state.gen.step == 1);
  }
}

TEST_CASE("train_step with a zero learning rate reports losses without moving parameters") {
  const Fixture f;
  TrainConfig cfg = small_config(Mode::unit);
  cfg.learning_rate = 0.0;
  TrainState state = init_train_state(cfg, f.topo);
  const auto before = snapshot(state.params);
  Rng rng(5);
  const LossBreakdown b = train_step(state, sample_pair_batch(f.data, 2, 8, rng), f.topo, cfg);
  CHECK(snapshot(state.params) == before);
  CHECK(b.adv_d > 0.0);
  CHECK(*b.vae > 0.0);
  CHECK(*b.recon > 0.0);
  CHECK(*b.recon <= *b.vae);
  CHECK(std::abs(b.total_g - (b.adv_g + cfg.weights.vae * *b.vae + cfg.weights.latent_cycle * *b.latent_cycle)) <= 1e-12);
}

TEST_CASE("each mode evaluates only its own terms") {
  const Fixture f;
  Rng rng(6);
  const PairBatch batch = sample_pair_batch(f.data, 2, 8, rng);
  {
    const TrainConfig cfg = small_config(Mode::cyclegan);
    TrainState state = init_train_state(cfg, f.topo);
    reset_loss_counts();
    const LossBreakdown b = train_step(state, batch, f.topo, cfg);
    const LossCounts n = loss_counts();
    CHECK(n.cycle == 2);
    CHECK(n.vae == 0);
    CHECK(n.latent_cycle == 0);
    CHECK(n.discriminator == 2);
    CHECK(b.cycle.has_value());
    CHECK_FALSE(b.vae.has_value());
    CHECK_FALSE(b.recon.has_value());
  }
  {
    const TrainConfig cfg = small_config(Mode::unit);
    TrainState state = init_train_state(cfg, f.topo);
    reset_loss_counts();
    const LossBreakdown b = train_step(state, batch, f.topo, cfg);
    const LossCounts n = loss_counts();
    CHECK(n.cycle == 0);
    CHECK(n.vae == 2);
    CHECK(n.latent_cycle == 2);
    CHECK_FALSE(b.cycle.has_value());
  }
}

TEST_CASE("non-finite input aborts the step") {
  const Fixture f;
  const TrainConfig cfg = small_config(Mode::unit);
  TrainState state = init_train_state(cfg, f.topo);
  Rng rng(7);
  PairBatch batch = sample_pair_batch(f.data, 2, 8, rng);
  batch.x_a[5] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(train_step(state, batch, f.topo, cfg), NonFiniteError);
}

TEST_CASE("trace rows") {
  LossBreakdown b = make_breakdown(Mode::unit, 0.25, {0.5, std::nullopt, 0.2, 0.05}, 0.125, LossWeights{});
  CHECK(trace_header(Mode::unit) == "step\tadv_D\tadv_G\tvae\trecon\tlatent_cycle\ttotal_G");
  CHECK(trace_row(7, b) == "7\t0.25\t0.5\t0.2\t0.125\t0.05\t3");
  b = make_breakdown(Mode::cyclegan, 0.25, {0.5, 0.1, std::nullopt, std::nullopt}, std::nullopt, LossWeights{});
  CHECK(trace_header(Mode::cyclegan) == "step\tadv_D\tadv_G\tcycle\ttotal_G");
  CHECK(trace_row(1, b) == "1\t0.25\t0.5\t0.1\t1.5");
}

TEST_CASE("checkpoint restores parameters and optimiser state bitwise") {
  const Fixture f;
  const TrainConfig cfg = small_config(Mode::cyclegan);
  TrainState state = init_train_state(cfg, f.topo);
  Rng rng(8);
  train_step(state, sample_pair_batch(f.data, 2, 8, rng), f.topo, cfg);
  state.step = 1;
  const auto dir = scratch("ckpt");
  write_checkpoint(dir / "c.bin", make_checkpoint(state, cfg, f.topo, f.data.id));
  const Checkpoint ck = read_checkpoint(dir / "c.bin");
  CHECK(ck.meta.at("config_hash") == config_hash(cfg));
  CHECK(ck.meta.at("mode") == "cyclegan");
  const TrainState back = restore_train_state(ck, cfg, f.topo);
  CHECK(snapshot(back.params) == snapshot(state.params));
  CHECK(back.gen.m == state.gen.m);
  CHECK(back.gen.v == state.gen.v);
  CHECK(back.disc.m == state.disc.m);
  CHECK(back.disc.v == state.disc.v);
  CHECK(back.gen.step == 1);
  CHECK(back.step == 1);

  TrainConfig other = cfg;
  other.hyper.latent_dim = 8;
  CHECK_THROWS_AS(restore_train_state(ck, other, f.topo), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("train_loop") {
  const auto dir = scratch("loop");
  write_dataset(dir / "data", small_dataset(2, 5, 12));
  TrainConfig cfg = small_config(Mode::unit);
  cfg.dataset = dir / "data";

  SUBCASE("one step writes one trace row and one final checkpoint") {
    cfg.steps = 1;
    const TrainResult r = train_loop(cfg, {dir / "one", std::nullopt});
    const auto rows = lines_of(slurp(r.trace));
    REQUIRE(rows.size() == 2);
    CHECK(rows[0] == trace_header(Mode::unit));
    CHECK(rows[1].rfind("1\t", 0) == 0);
    CHECK(std::filesystem::exists(dir / "one" / "final.bin"));
    CHECK_FALSE(std::filesystem::exists(dir / "one" / "ckpt_1.bin"));
    CHECK(read_config(dir / "one" / "config.txt") == cfg);
    CHECK(r.losses.size() == 1);
  }

  SUBCASE("runs are deterministic and resume reproduces the tail") {
    const TrainResult a = train_loop(cfg, {dir / "a", std::nullopt});
    const TrainResult b = train_loop(cfg, {dir / "b", std::nullopt});
    CHECK(slurp(a.trace) == slurp(b.trace));
    CHECK(slurp(a.final_checkpoint) == slurp(b.final_checkpoint));
    CHECK(lines_of(slurp(a.trace)).size() == 7);
    CHECK(std::filesystem::exists(dir / "a" / "ckpt_3.bin"));
    CHECK_FALSE(std::filesystem::exists(dir / "a" / "ckpt_6.bin"));

    std::filesystem::copy(dir / "a", dir / "c");
    // Leave rows past the checkpoint in the trace; resume must drop them.
    const TrainResult c = train_loop(cfg, {dir / "c", dir / "c" / "ckpt_3.bin"});
    CHECK(c.losses.size() == 3);
    CHECK(slurp(c.trace) == slurp(a.trace));
    CHECK(slurp(c.final_checkpoint) == slurp(a.final_checkpoint));

    cfg.seed = 2;
    const TrainResult d = train_loop(cfg, {dir / "d", std::nullopt});
    CHECK(slurp(d.trace) != slurp(a.trace));
  }

  SUBCASE("every logged value is finite") {
    const TrainResult r = train_loop(cfg, {dir / "finite", std::nullopt});
    for (const LossBreakdown& b : r.losses) {
      for (std::optional<double> v : {std::optional(b.adv_d), std::optional(b.adv_g), b.vae, b.recon, b.latent_cycle,
                                      std::optional(b.total_g)}) {
        REQUIRE(v.has_value());
        CHECK(std::isfinite(*v));
      }
    }
  }

  SUBCASE("invalid config and missing dataset") {
    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(train_loop(cfg, {dir / "bad", std::nullopt}), ConfigError);
    cfg.learning_rate = 1e-3;
    cfg.dataset = dir / "missing";
    CHECK_THROWS_AS(train_loop(cfg, {dir / "bad", std::nullopt}), Error);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("config text") {
  TrainConfig cfg = small_config(Mode::cyclegan);
  cfg.dataset = "data/desk";
  cfg.learning_rate = 3e-4;
  cfg.weights.latent = 0.02;
  cfg.hyper.variant = UpVariant::transposed;
  CHECK(parse_config(format_config(cfg)) == cfg);
  CHECK(config_hash(cfg).size() == 16);
  TrainConfig other = cfg;
  other.seed = 9;
  CHECK(config_hash(other) != config_hash(cfg));

  const TrainConfig parsed = parse_config("# smoke\nmode = unit  # comment\n\nsteps=12\nchannels = 8, 8,16\n");
  CHECK(parsed.mode == Mode::unit);
  CHECK(parsed.steps == 12);
  CHECK(parsed.hyper.channels == std::array<std::size_t, 3>{8, 8, 16});
  CHECK(parsed.learning_rate == TrainConfig{}.learning_rate);

  const auto message = [](std::string_view text) {
    try {
      parse_config(text, "cfg.txt");
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message("steps = 3\nwarmup = 5\n") == "cfg.txt: line 2: unknown config key 'warmup'");
  CHECK(message("steps = -3\n").find("line 1") != std::string::npos);
  CHECK(message("learning_rate = fast\n").find("learning_rate") != std::string::npos);
  CHECK(message("mode = wgan\n").find("mode") != std::string::npos);
  CHECK(message("channels = 1,2\n").find("channels") != std::string::npos);
  CHECK(message("channels = 1,2,3,4\n").find("channels") != std::string::npos);
  CHECK(message("steps\n").find("key = value") != std::string::npos);

  TrainConfig v;
  CHECK_NOTHROW(v.validate());
  v.learning_rate = 0.0;
  CHECK_THROWS_AS(v.validate(), ConfigError);
  v = {};
  v.beta2 = 1.0;
  CHECK_THROWS_AS(v.validate(), ConfigError);
  v = {};
  v.steps = 0;
  CHECK_THROWS_AS(v.validate(), ConfigError);
  v = {};
  v.hyper.latent_dim = 0;
  CHECK_THROWS_AS(v.validate(), ConfigError);
  CHECK_THROWS_AS(read_config("/nonexistent/mrt.cfg"), IoError);
}
