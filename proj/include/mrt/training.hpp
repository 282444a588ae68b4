#pragma once

// Adversarial training: two-character batches, one discriminator step then one
// generator step per iteration, Adam updates, checkpoints and a loss trace.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mrt/models.hpp"
#include "mrt/motiondata.hpp"
#include "mrt/objectives.hpp"

namespace mrt {

// Config file: one "key = value" per line, '#' starts a comment, unknown keys
// are errors. Keys:
//   mode, steps, batch_size, learning_rate, beta1, beta2, lambda_cyc,
//   lambda_vae, lambda_cc, lambda_z, seed, checkpoint_every, dataset,
//   channels (three comma-separated widths), latent_dim, frames, variant
struct TrainConfig {
  Mode mode = Mode::unit;
  std::size_t steps = 500;
  std::size_t batch_size = 4;
  double learning_rate = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  LossWeights weights;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 100;  // 0: final checkpoint only
  std::filesystem::path dataset;
  HyperParams hyper;

  void validate() const;  // throws ConfigError
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Applies one key/value pair; used by the file parser and by CLI overrides.
void set_config_value(TrainConfig& cfg, std::string_view key, std::string_view value);
TrainConfig parse_config(std::string_view text, const std::string& source = "<config>");
TrainConfig read_config(const std::filesystem::path& path);
// Every key, in the order listed above. parse_config(format_config(c)) == c.
std::string format_config(const TrainConfig& cfg);
// FNV-1a of format_config, as 16 hex digits.
std::string config_hash(const TrainConfig& cfg);

// ---------------------------------------------------------------------------

struct PairBatch {
  std::string char_a, char_b;
  Tensor x_a, x_b;  // [B, T, N, 3], root-centered
  Tensor l_a, l_b;  // [bones]
};

// Crops a clip to `frames` at `offset`, or pads it by repeating its last frame.
Motion crop_or_pad(const Motion& m, std::size_t frames, std::size_t offset);

// Two distinct train characters, then batch_size clips from each character's
// train pool (without replacement when the pool is large enough, otherwise
// with replacement), each cropped at a random offset or padded.
PairBatch sample_pair_batch(const Dataset& data, std::size_t batch_size, std::size_t frames, Rng& rng);

// Topology shared by every character of the dataset.
Topology dataset_topology(const Dataset& data);

// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<Tensor> m, v;
  std::uint64_t step = 0;
};

inline constexpr double kAdamEpsilon = 1e-8;

AdamState make_adam_state(std::span<Tensor* const> params);
// Bias-corrected Adam, in place. Throws ShapeError on mismatched shapes.
void adam_update(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state, double lr,
                 double beta1, double beta2);

struct TrainState {
  ModelParams<Tensor> params;
  AdamState gen;   // encoder then decoder tensors, in visit order
  AdamState disc;  // discriminator tensors
  std::size_t step = 0;  // completed steps
};

// Parameters from derive_seed(seed, 0). With a calibration batch, every layer
// is then calibrated on its first character (see models.hpp) so sigmoids start
// unsaturated and outputs start centred.
TrainState init_train_state(const TrainConfig& cfg, const Topology& topo, const PairBatch* calibration = nullptr);

// Seed stream of the calibration batch drawn by train_loop.
inline constexpr std::uint64_t kCalibrationStream = 0xffffffffffffffffULL;

// Non-finite loss during training.
class TrainingError : public Error {
 public:
  using Error::Error;
};

// Discriminator update on both translation directions with the fakes held
// constant. Returns adv_D before the update.
double discriminator_step(TrainState& state, const PairBatch& batch, const Topology& topo, const TrainConfig& cfg);
// Generator update with the discriminator held constant. Returns the breakdown
// before the update, with adv_d copied in.
LossBreakdown generator_step(TrainState& state, const PairBatch& batch, const Topology& topo, const TrainConfig& cfg,
                             double adv_d);
// discriminator_step then generator_step.
LossBreakdown train_step(TrainState& state, const PairBatch& batch, const Topology& topo, const TrainConfig& cfg);

// Per-step randomness: batch sampling at step s (1-based) uses
// Rng(derive_seed(seed, s)).
Rng step_rng(std::uint64_t seed, std::size_t step);

// ---------------------------------------------------------------------------

// Loss trace: a header row and one tab-separated row per step.
std::string trace_header(Mode mode);
std::string trace_row(std::size_t step, const LossBreakdown& b);

// Checkpoint with model params under "model", Adam moments under
// "adam.gen.{m,v}.<i>" / "adam.disc.{m,v}.<i>", and the step, seed, mode,
// dataset id and config hash in meta.
Checkpoint make_checkpoint(const TrainState& state, const TrainConfig& cfg, const Topology& topo,
                           const std::string& dataset_id);
TrainState restore_train_state(const Checkpoint& ckpt, const TrainConfig& cfg, const Topology& topo);

struct TrainOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume;
};

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::filesystem::path trace;
  std::vector<LossBreakdown> losses;  // steps run by this call
};

// Writes out_dir/config.txt, out_dir/loss.tsv, out_dir/ckpt_<step>.bin every
// checkpoint_every steps and out_dir/final.bin. On resume, trace rows after
// the checkpoint's step are dropped before appending. A non-finite loss
// throws TrainingError naming the step; checkpoints already written remain.
TrainResult train_loop(const TrainConfig& cfg, const TrainOptions& opts);

}  // namespace mrt
