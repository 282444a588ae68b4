#pragma once

// Synthetic characters and clips, the unpaired-train / paired-test dataset
// protocol, and the on-disk clip and dataset formats.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mrt/skeleton.hpp"

namespace mrt {

struct CharacterSpec {
  std::string id;
  Skeleton skeleton;
  std::vector<double> flexibility;  // per joint, in (0, 1]

  friend bool operator==(const CharacterSpec&, const CharacterSpec&) = default;
};

std::vector<CharacterSpec> generate_character_family(const Skeleton& canonical, std::size_t count,
                                                     double scale_min, double scale_max, std::uint64_t seed);

inline constexpr double kClipFrameRate = 30.0;
inline constexpr double kMaxEulerDeg = 60.0;

// Per-joint XYZ Euler trajectories in degrees, T x N x 3. Each axis is a sum
// of 1-3 sinusoids whose amplitudes add up to at most kMaxEulerDeg.
std::vector<double> generate_euler_tracks(std::size_t joints, std::size_t frames, std::uint64_t seed);

RotationMotion generate_rotation_clip(const Skeleton& canonical, std::size_t frames, std::uint64_t seed);

enum class DatasetMode { exact, flexibility };
std::string to_string(DatasetMode mode);
DatasetMode parse_dataset_mode(std::string_view s);

enum class Split { train, test };
std::string to_string(Split split);

struct ClipRecord {
  std::string clip_id;
  std::string character_id;
  Split split = Split::train;
  std::string pairing_key;  // empty for train clips
  std::uint64_t seed = 0;   // rotation-clip seed
  Motion motion;
  std::optional<RotationMotion> rotations;
};

struct Dataset {
  std::string id;
  DatasetMode mode = DatasetMode::exact;
  std::vector<CharacterSpec> characters;
  std::vector<ClipRecord> clips;

  const CharacterSpec& character(std::string_view id) const;
  std::vector<std::string> characters_in(Split split) const;
  std::vector<std::string> pairing_keys() const;
};

bool datasets_equal(const Dataset& a, const Dataset& b);

// Throws InvariantError naming the first violated invariant:
// "unpaired-train", "paired-test", "disjoint-characters", "unique-clip-id",
// "unknown-character", "joint-count", "character", "finite".
void validate_dataset(const Dataset& d);

struct SynthesisOptions {
  std::size_t train_chars = 6;
  std::size_t test_chars = 2;
  std::size_t clips_per_train_char = 20;
  std::size_t test_motions = 12;
  DatasetMode mode = DatasetMode::exact;
  std::size_t frames = 40;
  std::uint64_t seed = 0;
};

Dataset synthesize_dataset(const std::vector<CharacterSpec>& family, const SynthesisOptions& options);

// ---------------------------------------------------------------------------
// BVH subset: HIERARCHY with ROOT/JOINT/End Site, OFFSET, CHANNELS (3 or 6),
// MOTION with Frames and Frame Time.

struct BvhClip {
  Skeleton skeleton;
  RotationMotion motion;
};

BvhClip parse_bvh(std::string_view text);
BvhClip read_bvh(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Text formats. Numbers are written in shortest round-trip decimal form, so
// read(write(x)) reproduces every double bitwise.

struct ClipFile {
  Skeleton skeleton;
  Motion motion;
  std::optional<RotationMotion> rotations;
};

inline constexpr int kClipSchemaVersion = 1;
inline constexpr int kDatasetSchemaVersion = 1;

std::string format_clip(const ClipFile& clip);
ClipFile parse_clip(std::string_view text);
void write_clip(const std::filesystem::path& path, const ClipFile& clip);
ClipFile read_clip(const std::filesystem::path& path);

// Per-bone length file used by the CLI: "lengths" header then one value per bone.
std::vector<double> read_lengths(const std::filesystem::path& path);
void write_lengths(const std::filesystem::path& path, const std::vector<double>& lengths);

// Directory with manifest.txt and clips/<clip_id>.clip.
void write_dataset(const std::filesystem::path& dir, const Dataset& d);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace mrt
