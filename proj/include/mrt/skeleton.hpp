#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace mrt {

using Vec3 = Eigen::Vector3d;
using Quat = Eigen::Quaterniond;

inline constexpr int kNoParent = -1;

// Joint tree in topological order: joint 0 is the root and parent[i] < i for
// every other joint. Bone b connects joint b + 1 to its parent, so per-bone
// arrays have joint_count() - 1 entries.
struct Skeleton {
  std::vector<int> parent;
  std::vector<Vec3> rest_direction;  // per bone, unit length
  std::vector<double> bone_length;   // per bone, meters
  std::vector<std::string> joint_name;

  std::size_t joint_count() const noexcept { return parent.size(); }
  std::size_t bone_count() const noexcept { return parent.empty() ? 0 : parent.size() - 1; }

  friend bool operator==(const Skeleton&, const Skeleton&) = default;
};

constexpr std::size_t bone_of_joint(std::size_t joint) { return joint - 1; }
constexpr std::size_t joint_of_bone(std::size_t bone) { return bone + 1; }

struct SkeletonIssue {
  std::string invariant;  // "cycle", "multiple-roots", "non-positive-length", ...
  std::size_t index = 0;
  std::string message;
};

// Empty optional when every Skeleton invariant holds.
std::optional<SkeletonIssue> validate_skeleton(const Skeleton& s);
// Throws InvariantError carrying the issue.
void require_valid(const Skeleton& s);

// Time-indexed joint positions, T x N x 3 row-major, meters.
struct Motion {
  std::size_t frame_count = 0;
  std::size_t joint_count = 0;
  double frame_rate = 30.0;
  std::vector<double> positions;

  Motion() = default;
  Motion(std::size_t frames, std::size_t joints, double fps)
      : frame_count(frames), joint_count(joints), frame_rate(fps), positions(frames * joints * 3, 0.0) {}

  Vec3 position(std::size_t frame, std::size_t joint) const {
    const double* p = positions.data() + (frame * joint_count + joint) * 3;
    return {p[0], p[1], p[2]};
  }
  void set_position(std::size_t frame, std::size_t joint, const Vec3& v) {
    double* p = positions.data() + (frame * joint_count + joint) * 3;
    p[0] = v.x();
    p[1] = v.y();
    p[2] = v.z();
  }

  friend bool operator==(const Motion&, const Motion&) = default;
};

// Root trajectory plus per-joint local rotations. The rotation of joint i
// orients bone i - 1 relative to the global frame of its parent joint.
struct RotationMotion {
  std::size_t frame_count = 0;
  std::size_t joint_count = 0;
  double frame_rate = 30.0;
  std::vector<Vec3> root_position;  // T
  std::vector<Quat> joint_rotation;  // T x N

  RotationMotion() = default;
  RotationMotion(std::size_t frames, std::size_t joints, double fps);

  const Quat& rotation(std::size_t frame, std::size_t joint) const {
    return joint_rotation[frame * joint_count + joint];
  }
  Quat& rotation(std::size_t frame, std::size_t joint) { return joint_rotation[frame * joint_count + joint]; }
};

bool rotation_motion_equal(const RotationMotion& a, const RotationMotion& b);

// position[root] = root_position; position[i] = position[parent[i]] +
// G_i * (length * rest_direction) with G_i = G_parent * q_i.
Motion forward_kinematics(const Skeleton& s, const RotationMotion& r);

struct BoneLengthStats {
  std::vector<double> mean;           // per bone
  std::vector<double> max_deviation;  // per bone, max |length_t - mean|
};

BoneLengthStats bone_lengths_from_motion(const Motion& m, std::span<const int> parent);

// Subtracts the root position from every joint, frame by frame.
Motion root_center(const Motion& m);

// Intrinsic Euler rotation: axes[0] applied first in the parent frame, each
// later axis in the rotated frame. axes is a permutation-like string over
// {X, Y, Z}; angles in degrees.
Quat quat_from_euler_deg(std::string_view axes, std::span<const double> degrees);

// Interpolates from identity (factor 0) to q (factor 1) along the shortest arc.
Quat scale_rotation(const Quat& q, double factor);

// Built-in stick-figure skeletons: 5, 8 and 15 joints are humanoid presets;
// any other count >= 2 yields a branching test tree.
Skeleton canonical_skeleton(std::size_t joints);

}  // namespace mrt
