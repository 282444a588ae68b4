#pragma once

// Least-squares adversarial losses, cycle and reconstruction terms, and the
// per-mode generator objective. Every squared norm is a mean over elements.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "mrt/autodiff.hpp"

namespace mrt {

enum class Mode { cyclegan, unit };
std::string to_string(Mode m);
Mode parse_mode(std::string_view s);

struct LossWeights {
  double cycle = 10.0;         // lambda_cyc
  double vae = 10.0;           // lambda_vae
  double latent_cycle = 10.0;  // lambda_cc
  double latent = 0.01;        // lambda_z, latent penalty inside the vae term

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

// 1/2 mean((real - 1)^2) + 1/2 mean(fake^2). Scores are scalars or [B].
Var loss_discriminator(Var real, Var fake);
// 1/2 mean((fake - 1)^2).
Var loss_generator_adv(Var fake);
// mean((x - roundtrip)^2).
Var loss_cycle(Var x, Var roundtrip);
// mean((x - reconstruction)^2) + lambda_z mean(z^2).
Var loss_vae(Var x, Var reconstruction, Var z, double lambda_z);
// mean((z_source - z_translated)^2).
Var loss_latent_cycle(Var z_source, Var z_translated);

// How many times each loss has been evaluated on this thread.
struct LossCounts {
  std::uint64_t discriminator = 0;
  std::uint64_t generator_adv = 0;
  std::uint64_t cycle = 0;
  std::uint64_t vae = 0;
  std::uint64_t latent_cycle = 0;
};
LossCounts loss_counts();
void reset_loss_counts();

// Inputs of the generator objective. cyclegan needs cycle; unit needs vae and
// latent_cycle.
template <typename T>
struct GeneratorTerms {
  T adv_g;
  std::optional<T> cycle;
  std::optional<T> vae;
  std::optional<T> latent_cycle;
};

// cyclegan: adv_g + lambda_cyc cycle
// unit:     adv_g + lambda_vae vae + lambda_cc latent_cycle
// Throws Error when a term the mode needs is missing.
double total_generator(Mode mode, const GeneratorTerms<double>& terms, const LossWeights& w);
Var total_generator(Mode mode, const GeneratorTerms<Var>& terms, const LossWeights& w);

// One training step's losses. Terms the mode does not use stay empty.
// recon is the reconstruction part of the vae term.
struct LossBreakdown {
  Mode mode = Mode::unit;
  double adv_d = 0.0;
  double adv_g = 0.0;
  std::optional<double> cycle;
  std::optional<double> vae;
  std::optional<double> recon;
  std::optional<double> latent_cycle;
  double total_g = 0.0;
};

// Builds a breakdown from the terms, computing total_g.
LossBreakdown make_breakdown(Mode mode, double adv_d, const GeneratorTerms<double>& terms, std::optional<double> recon,
                             const LossWeights& w);

}  // namespace mrt
