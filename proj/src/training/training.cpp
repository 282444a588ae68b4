#include <cmath>
#include <fstream>
#include <sstream>

#include "mrt/text.hpp"
#include "mrt/training.hpp"

namespace mrt {

// ---------------------------------------------------------------------------
// Batches

Motion crop_or_pad(const Motion& m, std::size_t frames, std::size_t offset) {
  if (m.frame_count == 0) throw Error("crop_or_pad: empty clip");
  if (m.frame_count >= frames && offset + frames > m.frame_count) {
    throw Error("crop_or_pad: offset " + std::to_string(offset) + " leaves fewer than " + std::to_string(frames) +
                " frames");
  }
  Motion out(frames, m.joint_count, m.frame_rate);
  for (std::size_t t = 0; t < frames; ++t) {
    const std::size_t src = m.frame_count >= frames ? offset + t : std::min(t, m.frame_count - 1);
    for (std::size_t j = 0; j < m.joint_count; ++j) out.set_position(t, j, m.position(src, j));
  }
  return out;
}

Topology dataset_topology(const Dataset& data) {
  if (data.characters.empty()) throw Error("dataset " + data.id + " has no characters");
  const std::vector<int>& parent = data.characters.front().skeleton.parent;
  for (const CharacterSpec& c : data.characters) {
    if (c.skeleton.parent != parent) throw Error("dataset " + data.id + ": character " + c.id + " has a different topology");
  }
  return Topology::from_parents(parent);
}

namespace {

Tensor character_lengths(const CharacterSpec& c, const Topology& topo) {
  Tensor l({topo.bones()});
  for (std::size_t b = 0; b < topo.bones(); ++b) l[b] = c.skeleton.bone_length[bone_of_joint(topo.bone_child[b])];
  return l;
}

Tensor stack_clips(const std::vector<Motion>& clips) {
  const Tensor first = motion_to_tensor(clips.front());
  Shape shape{clips.size()};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  Tensor out(shape);
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const Tensor t = motion_to_tensor(clips[i]);
    std::copy(t.data().begin(), t.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * t.size()));
  }
  return out;
}

std::vector<Motion> draw_clips(const std::vector<const ClipRecord*>& pool, std::size_t count, std::size_t frames,
                               Rng& rng) {
  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<Motion> out;
  for (std::size_t k = 0; k < count; ++k) {
    std::size_t pick;
    if (pool.size() >= count) {
      // Partial Fisher-Yates: without replacement.
      const std::size_t j = k + uniform_index(rng, pool.size() - k);
      std::swap(order[k], order[j]);
      pick = order[k];
    } else {
      pick = uniform_index(rng, pool.size());
    }
    const Motion& m = pool[pick]->motion;
    const std::size_t offset = m.frame_count > frames ? uniform_index(rng, m.frame_count - frames + 1) : 0;
    out.push_back(crop_or_pad(m, frames, offset));
  }
  return out;
}

}  // namespace

PairBatch sample_pair_batch(const Dataset& data, std::size_t batch_size, std::size_t frames, Rng& rng) {
  if (batch_size < 1) throw Error("sample_pair_batch: batch_size must be at least 1");
  const std::vector<std::string> chars = data.characters_in(Split::train);
  if (chars.size() < 2) {
    throw Error("sample_pair_batch: dataset " + data.id + " has " + std::to_string(chars.size()) +
                " train characters, need at least 2");
  }
  const std::size_t a = uniform_index(rng, chars.size());
  std::size_t b = uniform_index(rng, chars.size() - 1);
  if (b >= a) ++b;

  const Topology topo = dataset_topology(data);
  PairBatch batch;
  batch.char_a = chars[a];
  batch.char_b = chars[b];
  for (const std::string* id : {&batch.char_a, &batch.char_b}) {
    std::vector<const ClipRecord*> pool;
    for (const ClipRecord& c : data.clips) {
      if (c.split == Split::train && c.character_id == *id) pool.push_back(&c);
    }
    if (pool.empty()) throw Error("sample_pair_batch: character " + *id + " has no train clips");
    const Tensor x = stack_clips(draw_clips(pool, batch_size, frames, rng));
    const Tensor l = character_lengths(data.character(*id), topo);
    if (id == &batch.char_a) {
      batch.x_a = x;
      batch.l_a = l;
    } else {
      batch.x_b = x;
      batch.l_b = l;
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Adam

AdamState make_adam_state(std::span<Tensor* const> params) {
  AdamState s;
  for (const Tensor* p : params) {
    s.m.emplace_back(p->shape());
    s.v.emplace_back(p->shape());
  }
  return s;
}

void adam_update(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state, double lr,
                 double beta1, double beta2) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_update: parameter, gradient and moment counts differ");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].shape() != params[k]->shape() || state.m[k].shape() != params[k]->shape() ||
        state.v[k].shape() != params[k]->shape()) {
      throw ShapeError("adam_update: shape mismatch at parameter " + std::to_string(k));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(beta1, t);
  const double c2 = 1.0 - std::pow(beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    Tensor& m = state.m[k];
    Tensor& v = state.v[k];
    const Tensor& g = grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + kAdamEpsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Steps

namespace {

template <typename P>
std::vector<Tensor*> tensor_ptrs(P& params) {
  std::vector<Tensor*> out;
  P::visit(params, [&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

std::vector<Tensor*> generator_ptrs(ModelParams<Tensor>& p) {
  std::vector<Tensor*> out = tensor_ptrs(p.enc);
  const std::vector<Tensor*> dec = tensor_ptrs(p.dec);
  out.insert(out.end(), dec.begin(), dec.end());
  return out;
}

template <template <typename> class P>
void collect_grads(const Tape& tape, const P<Var>& bound, std::vector<Tensor>& out) {
  P<Var>::visit(bound, [&](const std::string&, const Var& v) { out.push_back(tape.grad(v)); });
}

}  // namespace

TrainState init_train_state(const TrainConfig& cfg, const Topology& topo, const PairBatch* calibration) {
  TrainState s;
  s.params = init_params(cfg.hyper, topo, derive_seed(cfg.seed, 0));
  if (calibration) calibrate(s.params, calibration->x_a, calibration->l_a, topo, cfg.hyper.variant);
  s.gen = make_adam_state(generator_ptrs(s.params));
  s.disc = make_adam_state(tensor_ptrs(s.params.disc));
  return s;
}

Rng step_rng(std::uint64_t seed, std::size_t step) { return Rng(derive_seed(seed, step)); }

double discriminator_step(TrainState& state, const PairBatch& batch, const Topology& topo, const TrainConfig& cfg) {
  const UpVariant variant = cfg.hyper.variant;
  Tape tape;
  const auto enc = bind(tape, state.params.enc, false);
  const auto dec = bind(tape, state.params.dec, false);
  const auto disc = bind(tape, state.params.disc, true);
  const Var xa = tape.constant(batch.x_a), xb = tape.constant(batch.x_b);
  const Var la = tape.constant(batch.l_a), lb = tape.constant(batch.l_b);
  const Var fake_ab = decode(encode(xa, topo, enc), lb, topo, dec, variant);
  const Var fake_ba = decode(encode(xb, topo, enc), la, topo, dec, variant);
  const Var loss = scale(loss_discriminator(discriminate(xb, lb, topo, disc), discriminate(fake_ab, lb, topo, disc)) +
                             loss_discriminator(discriminate(xa, la, topo, disc), discriminate(fake_ba, la, topo, disc)),
                         0.5);
  tape.backward(loss);
  std::vector<Tensor> grads;
  collect_grads(tape, disc, grads);
  adam_update(tensor_ptrs(state.params.disc), grads, state.disc, cfg.learning_rate, cfg.beta1, cfg.beta2);
  return loss.value().item();
}

LossBreakdown generator_step(TrainState& state, const PairBatch& batch, const Topology& topo, const TrainConfig& cfg,
                             double adv_d) {
  const UpVariant variant = cfg.hyper.variant;
  Tape tape;
  const auto enc = bind(tape, state.params.enc, true);
  const auto dec = bind(tape, state.params.dec, true);
  const auto disc = bind(tape, state.params.disc, false);
  const Var xa = tape.constant(batch.x_a), xb = tape.constant(batch.x_b);
  const Var la = tape.constant(batch.l_a), lb = tape.constant(batch.l_b);
  const Var za = encode(xa, topo, enc), zb = encode(xb, topo, enc);
  const Var fake_ab = decode(za, lb, topo, dec, variant);
  const Var fake_ba = decode(zb, la, topo, dec, variant);
  GeneratorTerms<Var> terms{scale(loss_generator_adv(discriminate(fake_ab, lb, topo, disc)) +
                                      loss_generator_adv(discriminate(fake_ba, la, topo, disc)),
                                  0.5),
                            std::nullopt, std::nullopt, std::nullopt};
  std::optional<double> recon;
  if (cfg.mode == Mode::cyclegan) {
    const Var back_a = decode(encode(fake_ab, topo, enc), la, topo, dec, variant);
    const Var back_b = decode(encode(fake_ba, topo, enc), lb, topo, dec, variant);
    terms.cycle = scale(loss_cycle(xa, back_a) + loss_cycle(xb, back_b), 0.5);
  } else {
    const Var rec_a = decode(za, la, topo, dec, variant);
    const Var rec_b = decode(zb, lb, topo, dec, variant);
    terms.vae = scale(loss_vae(xa, rec_a, za, cfg.weights.latent) + loss_vae(xb, rec_b, zb, cfg.weights.latent), 0.5);
    recon = 0.5 * (mean(square(xa - rec_a)).value().item() + mean(square(xb - rec_b)).value().item());
    terms.latent_cycle =
        scale(loss_latent_cycle(za, encode(fake_ab, topo, enc)) + loss_latent_cycle(zb, encode(fake_ba, topo, enc)), 0.5);
  }
  const Var total = total_generator(cfg.mode, terms, cfg.weights);
  tape.backward(total);
  std::vector<Tensor> grads;
  collect_grads(tape, enc, grads);
  collect_grads(tape, dec, grads);
  adam_update(generator_ptrs(state.params), grads, state.gen, cfg.learning_rate, cfg.beta1, cfg.beta2);

  const auto item = [](const std::optional<Var>& v) -> std::optional<double> {
    if (!v) return std::nullopt;
    return v->value().item();
  };
  const GeneratorTerms<double> values{terms.adv_g.value().item(), item(terms.cycle), item(terms.vae),
                                      item(terms.latent_cycle)};
  LossBreakdown b = make_breakdown(cfg.mode, adv_d, values, recon, cfg.weights);
  b.total_g = total.value().item();
  return b;
}

LossBreakdown train_step(TrainState& state, const PairBatch& batch, const Topology& topo, const TrainConfig& cfg) {
  return generator_step(state, batch, topo, cfg, discriminator_step(state, batch, topo, cfg));
}

// ---------------------------------------------------------------------------
// Trace and checkpoints

std::string trace_header(Mode mode) {
  if (mode == Mode::cyclegan) return "step\tadv_D\tadv_G\tcycle\ttotal_G";
  return "step\tadv_D\tadv_G\tvae\trecon\tlatent_cycle\ttotal_G";
}

std::string trace_row(std::size_t step, const LossBreakdown& b) {
  std::string row = std::to_string(step);
  const auto put = [&](std::optional<double> v) { row += "\t" + (v ? format_number(*v) : std::string("-")); };
  put(b.adv_d);
  put(b.adv_g);
  if (b.mode == Mode::cyclegan) {
    put(b.cycle);
  } else {
    put(b.vae);
    put(b.recon);
    put(b.latent_cycle);
  }
  put(b.total_g);
  return row;
}

Checkpoint make_checkpoint(const TrainState& state, const TrainConfig& cfg, const Topology& topo,
                           const std::string& dataset_id) {
  Checkpoint ck;
  ck.hyper = cfg.hyper;
  ck.parent.assign(topo.joints, kNoParent);
  for (std::size_t b = 0; b < topo.bones(); ++b) ck.parent[topo.bone_child[b]] = static_cast<int>(topo.bone_parent[b]);
  ck.meta = {{"step", std::to_string(state.step)},
             {"seed", std::to_string(cfg.seed)},
             {"mode", to_string(cfg.mode)},
             {"dataset", dataset_id},
             {"config_hash", config_hash(cfg)},
             {"config", format_config(cfg)},
             {"adam.gen.step", std::to_string(state.gen.step)},
             {"adam.disc.step", std::to_string(state.disc.step)}};
  append_params(ck.tensors, "model", state.params);
  for (const auto& [name, s] : {std::pair{"gen", &state.gen}, std::pair{"disc", &state.disc}}) {
    for (std::size_t i = 0; i < s->m.size(); ++i) {
      ck.tensors.push_back({"adam." + std::string(name) + ".m." + std::to_string(i), s->m[i]});
      ck.tensors.push_back({"adam." + std::string(name) + ".v." + std::to_string(i), s->v[i]});
    }
  }
  return ck;
}

namespace {

std::uint64_t meta_integer(const Checkpoint& ck, const std::string& key) {
  const auto it = ck.meta.find(key);
  if (it == ck.meta.end()) throw Error("checkpoint metadata is missing '" + key + "'");
  const auto v = parse_integer<std::uint64_t>(it->second);
  if (!v) throw Error("checkpoint metadata '" + key + "' is not an integer");
  return *v;
}

void restore_adam(const Checkpoint& ck, const std::string& name, AdamState& s) {
  std::map<std::string, const Tensor*> by_name;
  for (const NamedTensor& t : ck.tensors) by_name[t.name] = &t.value;
  for (std::size_t i = 0; i < s.m.size(); ++i) {
    for (auto [kind, dst] : {std::pair{"m", &s.m[i]}, std::pair{"v", &s.v[i]}}) {
      const std::string key = "adam." + name + "." + kind + "." + std::to_string(i);
      const auto it = by_name.find(key);
      if (it == by_name.end()) throw Error("checkpoint is missing tensor " + key);
      if (it->second->shape() != dst->shape()) throw ShapeError("checkpoint tensor " + key + " has the wrong shape");
      *dst = *it->second;
    }
  }
  s.step = meta_integer(ck, "adam." + name + ".step");
}

}  // namespace

TrainState restore_train_state(const Checkpoint& ckpt, const TrainConfig& cfg, const Topology& topo) {
  if (!(ckpt.hyper == cfg.hyper)) throw Error("checkpoint hyperparameters differ from the config");
  const Topology ck_topo = Topology::from_parents(ckpt.parent);
  if (ck_topo.bone_parent != topo.bone_parent || ck_topo.bone_child != topo.bone_child) {
    throw Error("checkpoint topology differs from the dataset");
  }
  TrainState s = init_train_state(cfg, topo);
  s.params = extract_params(ckpt, "model");
  check_model(s.params, cfg.hyper, topo);
  restore_adam(ckpt, "gen", s.gen);
  restore_adam(ckpt, "disc", s.disc);
  s.step = meta_integer(ckpt, "step");
  return s;
}

// ---------------------------------------------------------------------------
// Loop

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

// Header plus rows with step <= keep_through, or a fresh header.
std::string initial_trace(const std::filesystem::path& path, Mode mode, std::size_t keep_through) {
  std::string out = trace_header(mode) + "\n";
  if (keep_through == 0 || !std::filesystem::exists(path)) return out;
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  if (line != trace_header(mode)) throw Error(path.string() + ": trace header does not match mode " + to_string(mode));
  while (std::getline(in, line)) {
    const auto step = parse_integer<std::size_t>(std::string_view(line).substr(0, line.find('\t')));
    if (step && *step <= keep_through) out += line + "\n";
  }
  return out;
}

}  // namespace

TrainResult train_loop(const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  const Dataset data = read_dataset(cfg.dataset);
  const Topology topo = dataset_topology(data);
  std::filesystem::create_directories(opts.out_dir);
  write_text(opts.out_dir / "config.txt", format_config(cfg));

  TrainState state;
  if (opts.resume) {
    state = restore_train_state(read_checkpoint(*opts.resume), cfg, topo);
  } else {
    Rng rng(derive_seed(cfg.seed, kCalibrationStream));
    const PairBatch calibration = sample_pair_batch(data, cfg.batch_size, cfg.hyper.frames, rng);
    state = init_train_state(cfg, topo, &calibration);
  }
  TrainResult result;
  result.trace = opts.out_dir / "loss.tsv";
  write_text(result.trace, initial_trace(result.trace, cfg.mode, state.step));
  std::ofstream trace(result.trace, std::ios::binary | std::ios::app);
  if (!trace) throw IoError("cannot append to " + result.trace.string());

  for (std::size_t s = state.step + 1; s <= cfg.steps; ++s) {
    Rng rng = step_rng(cfg.seed, s);
    const PairBatch batch = sample_pair_batch(data, cfg.batch_size, cfg.hyper.frames, rng);
    LossBreakdown b;
    try {
      b = train_step(state, batch, topo, cfg);
    } catch (const NonFiniteError& e) {
      throw TrainingError("non-finite value at training step " + std::to_string(s) + ": " + e.what());
    }
    for (std::optional<double> v : {std::optional(b.adv_d), std::optional(b.adv_g), b.cycle, b.vae, b.recon,
                                    b.latent_cycle, std::optional(b.total_g)}) {
      if (v && !std::isfinite(*v)) throw TrainingError("non-finite loss at training step " + std::to_string(s));
    }
    state.step = s;
    trace << trace_row(s, b) << '\n';
    trace.flush();
    if (!trace) throw IoError("write failed for " + result.trace.string());
    result.losses.push_back(b);
    if (cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0 && s != cfg.steps) {
      write_checkpoint(opts.out_dir / ("ckpt_" + std::to_string(s) + ".bin"), make_checkpoint(state, cfg, topo, data.id));
    }
  }
  result.final_checkpoint = opts.out_dir / "final.bin";
  write_checkpoint(result.final_checkpoint, make_checkpoint(state, cfg, topo, data.id));
  return result;
}

}  // namespace mrt
