#include "mrt/objectives.hpp"

#include "mrt/error.hpp"

namespace mrt {

namespace {

thread_local LossCounts counts;

void require_scores(Var s, const char* what) {
  if (s.value().size() == 0) throw Error(std::string(what) + ": empty batch");
  if (s.shape().size() > 1) throw ShapeError(std::string(what) + ": scores must be a scalar or [B], got " + shape_str(s.shape()));
}

void require_same(Var a, Var b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  if (a.value().size() == 0) throw Error(std::string(what) + ": empty input");
}

Var offset(Var s, double v) { return s - s.tape()->constant(Tensor(s.shape(), v)); }

}  // namespace

std::string to_string(Mode m) { return m == Mode::cyclegan ? "cyclegan" : "unit"; }

Mode parse_mode(std::string_view s) {
  if (s == "cyclegan") return Mode::cyclegan;
  if (s == "unit") return Mode::unit;
  throw Error("unknown mode '" + std::string(s) + "' (expected cyclegan or unit)");
}

Var loss_discriminator(Var real, Var fake) {
  require_scores(real, "loss_discriminator");
  require_scores(fake, "loss_discriminator");
  ++counts.discriminator;
  return scale(mean(square(offset(real, 1.0))), 0.5) + scale(mean(square(fake)), 0.5);
}

Var loss_generator_adv(Var fake) {
  require_scores(fake, "loss_generator_adv");
  ++counts.generator_adv;
  return scale(mean(square(offset(fake, 1.0))), 0.5);
}

Var loss_cycle(Var x, Var roundtrip) {
  require_same(x, roundtrip, "loss_cycle");
  ++counts.cycle;
  return mean(square(x - roundtrip));
}

Var loss_vae(Var x, Var reconstruction, Var z, double lambda_z) {
  require_same(x, reconstruction, "loss_vae");
  if (z.value().size() == 0) throw Error("loss_vae: empty latent");
  ++counts.vae;
  return mean(square(x - reconstruction)) + scale(mean(square(z)), lambda_z);
}

Var loss_latent_cycle(Var z_source, Var z_translated) {
  require_same(z_source, z_translated, "loss_latent_cycle");
  ++counts.latent_cycle;
  return mean(square(z_source - z_translated));
}

LossCounts loss_counts() { return counts; }
void reset_loss_counts() { counts = {}; }

namespace {

template <typename T>
const T& need(const std::optional<T>& term, Mode mode, const char* name) {
  if (!term) throw Error("generator objective: mode " + to_string(mode) + " needs the " + name + " term");
  return *term;
}

}  // namespace

double total_generator(Mode mode, const GeneratorTerms<double>& t, const LossWeights& w) {
  if (mode == Mode::cyclegan) return t.adv_g + w.cycle * need(t.cycle, mode, "cycle");
  return t.adv_g + w.vae * need(t.vae, mode, "vae") + w.latent_cycle * need(t.latent_cycle, mode, "latent_cycle");
}

Var total_generator(Mode mode, const GeneratorTerms<Var>& t, const LossWeights& w) {
  if (mode == Mode::cyclegan) return t.adv_g + scale(need(t.cycle, mode, "cycle"), w.cycle);
  return t.adv_g + scale(need(t.vae, mode, "vae"), w.vae) +
         scale(need(t.latent_cycle, mode, "latent_cycle"), w.latent_cycle);
}

LossBreakdown make_breakdown(Mode mode, double adv_d, const GeneratorTerms<double>& terms, std::optional<double> recon,
                             const LossWeights& w) {
  LossBreakdown b;
  b.mode = mode;
  b.adv_d = adv_d;
  b.adv_g = terms.adv_g;
  b.total_g = total_generator(mode, terms, w);
  if (mode == Mode::cyclegan) {
    b.cycle = terms.cycle;
  } else {
    b.vae = terms.vae;
    b.recon = recon;
    b.latent_cycle = terms.latent_cycle;
  }
  return b;
}

}  // namespace mrt
