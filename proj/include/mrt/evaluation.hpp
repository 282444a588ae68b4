#pragma once

// Baselines, reconstruction and retargeting errors, the comparison report and
// SVG frame rendering. Errors are mean per-joint Euclidean distances after
// root centering, in millimeters.

#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mrt/models.hpp"
#include "mrt/motiondata.hpp"

namespace mrt {

// ---------------------------------------------------------------------------
// Baselines

// Returns x_a unchanged. Throws ShapeError when the joint counts differ.
Motion position_copy(const Motion& x_a, const Skeleton& target);

// Keeps the source root; each joint is placed at its parent's new position
// plus target_length * (unit source bone direction), root to leaves.
// lengths_b is per bone (bone b ends at joint b + 1). Throws Error naming the
// frame and bone when a source bone has zero length.
Motion direction_copy(const Motion& x_a, std::span<const int> parent, std::span<const double> lengths_b);

// ---------------------------------------------------------------------------
// Trained model

struct Model {
  HyperParams hyper;
  Topology topo;
  std::vector<int> parent;
  ModelParams<Tensor> params;
  std::string id;           // checkpoint file name and step
  std::string config_hash;  // empty when the checkpoint carries none
  std::string config;       // training config text, if recorded
};

// Loads the "model" tensors of a training checkpoint.
Model load_model(const std::filesystem::path& path);
Model make_model(const Checkpoint& ckpt, const std::string& id);

// Translates a clip of any length: windows of hyper.frames frames start at
// 0, T, 2T, ... and a final window is aligned with the clip's end; each frame
// takes the first window covering it. Clips shorter than T are padded by
// repeating the last frame and cut back afterwards.
Motion apply_model(const Model& model, const Motion& x_a, std::span<const double> lengths_b);

// ---------------------------------------------------------------------------
// Metrics

// Mean over frames and non-root joints of |root_center(a) - root_center(b)|,
// in mm. The root contributes nothing after centering, so it is left out of
// the mean.
double motion_error_mm(const Motion& a, const Motion& b);

enum class Method { position_copy, direction_copy, model };
std::string to_string(Method m);
Method parse_method(std::string_view s);
// Table label: "Position copy", "Rotation copy", or the model's mode name.
std::string method_label(Method m, const std::string& model_mode = "Model");

// method(x_a -> character with the given skeleton). model may be null for
// the baselines.
Motion retarget(Method method, const Motion& x_a, const Skeleton& target, const Model* model);

// Any map from a source motion to a target skeleton. Must be safe to call
// from several threads at once.
using Retargeter = std::function<Motion(const Motion& x_a, const Skeleton& target)>;
Retargeter make_retargeter(Method method, const Model* model);

// Mean over the split's clips of motion_error_mm(x, f(x, own skeleton)).
double reconstruction_error(const Retargeter& f, const Dataset& data, Split split, std::size_t workers = 1);
// Also checks that the model's topology fits the dataset.
double reconstruction_error(const Model& model, const Dataset& data, Split split, std::size_t workers = 1);

// Mean over ordered pairs (A, B) of distinct test characters and every pairing
// key of motion_error_mm(f(x_A, skeleton_B), x_B). Throws Error when a test
// character lacks a key another one has, or when fewer than two test
// characters exist.
double retargeting_error(const Retargeter& f, const Dataset& data, std::size_t workers = 1);
double retargeting_error(Method method, const Dataset& data, const Model* model, std::size_t workers = 1);

// ---------------------------------------------------------------------------
// Report

struct MethodRow {
  std::string method;
  double recon_train_mm = 0.0;
  double recon_test_mm = 0.0;
  double retarget_test_mm = 0.0;

  friend bool operator==(const MethodRow&, const MethodRow&) = default;
};

struct EvalReport {
  std::string dataset_id;
  std::string checkpoint_id;
  std::string config_hash;
  std::string config;  // training config text, recorded for the loss weights
  std::vector<MethodRow> rows;

  // Throws InvariantError when an error is negative or non-finite.
  void validate() const;
};

// Both baselines then the model. Baseline reconstruction errors are 0 by
// definition: each is the identity on its own skeleton.
EvalReport evaluate_all(const Model& model, const Dataset& data, std::size_t workers = 1);

// Markdown table with one-decimal millimeters; the lowest retargeting error
// is bold.
std::string format_table(const EvalReport& report);
// "key = value" lines: metadata, then row.<i>.<field> for every row.
std::string format_key_values(const EvalReport& report);
EvalReport parse_key_values(std::string_view text);

// ---------------------------------------------------------------------------
// Rendering

// Projection plane: the two world axes drawn as horizontal and vertical.
enum class Plane { xy, xz, zy };
std::string to_string(Plane p);
Plane parse_plane(std::string_view s);

// Orthographic projection of one frame as a standalone SVG: bones as
// segments, joints as dots. Byte-identical for identical inputs. Throws
// Error when the frame index is out of range.
std::string render_frame_svg(const Motion& m, std::span<const int> parent, std::size_t frame, Plane plane = Plane::xy);

struct Panel {
  std::string title;
  const Motion* motion;
  std::span<const int> parent;
};
// Panels side by side with a shared scale, e.g. source / prediction / truth.
std::string render_panels_svg(std::span<const Panel> panels, std::size_t frame, Plane plane = Plane::xy);

void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace mrt
