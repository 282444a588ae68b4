#include "mrt/skeleton.hpp"

#include <cmath>
#include <string>

#include "mrt/error.hpp"

namespace mrt {

std::optional<SkeletonIssue> validate_skeleton(const Skeleton& s) {
  const std::size_t n = s.joint_count();
  auto issue = [](std::string inv, std::size_t index, std::string msg) {
    return std::optional<SkeletonIssue>(SkeletonIssue{std::move(inv), index, std::move(msg)});
  };
  if (n == 0) return issue("empty", 0, "skeleton has no joints");

  for (std::size_t i = 0; i < n; ++i) {
    const int p = s.parent[i];
    if (p != kNoParent && (p < 0 || static_cast<std::size_t>(p) >= n)) {
      return issue("parent-range", i, "parent index " + std::to_string(p) + " of joint " + std::to_string(i) + " out of range");
    }
  }
  // Walking up from any joint must reach a root within n steps.
  for (std::size_t i = 0; i < n; ++i) {
    int j = static_cast<int>(i);
    std::size_t steps = 0;
    while (j != kNoParent && steps <= n) {
      j = s.parent[static_cast<std::size_t>(j)];
      ++steps;
    }
    if (j != kNoParent) return issue("cycle", i, "cycle in parent array through joint " + std::to_string(i));
  }
  std::size_t roots = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (s.parent[i] == kNoParent && ++roots > 1) {
      return issue("multiple-roots", i, "second root at joint " + std::to_string(i));
    }
  }
  if (s.parent[0] != kNoParent) return issue("root-first", 0, "joint 0 must be the root");
  for (std::size_t i = 1; i < n; ++i) {
    if (s.parent[i] >= static_cast<int>(i)) {
      return issue("topological-order", i, "parent of joint " + std::to_string(i) + " does not precede it");
    }
  }
  const std::size_t bones = n - 1;
  if (s.bone_length.size() != bones || s.rest_direction.size() != bones) {
    return issue("bone-count", 0, "expected " + std::to_string(bones) + " bone lengths and directions");
  }
  if (!s.joint_name.empty() && s.joint_name.size() != n) {
    return issue("joint-names", 0, "expected " + std::to_string(n) + " joint names");
  }
  for (std::size_t b = 0; b < bones; ++b) {
    if (!(s.bone_length[b] > 0.0) || !std::isfinite(s.bone_length[b])) {
      return issue("non-positive-length", b, "non-positive length at bone " + std::to_string(b));
    }
    const double norm = s.rest_direction[b].norm();
    if (!(std::abs(norm - 1.0) <= 1e-9)) {
      return issue("non-unit-direction", b, "non-unit direction at bone " + std::to_string(b));
    }
  }
  return std::nullopt;
}

void require_valid(const Skeleton& s) {
  if (auto issue = validate_skeleton(s)) throw InvariantError(issue->invariant, issue->message);
}

RotationMotion::RotationMotion(std::size_t frames, std::size_t joints, double fps)
    : frame_count(frames),
      joint_count(joints),
      frame_rate(fps),
      root_position(frames, Vec3::Zero()),
      joint_rotation(frames * joints, Quat::Identity()) {}

bool rotation_motion_equal(const RotationMotion& a, const RotationMotion& b) {
  if (a.frame_count != b.frame_count || a.joint_count != b.joint_count || a.frame_rate != b.frame_rate) return false;
  for (std::size_t t = 0; t < a.frame_count; ++t) {
    if (a.root_position[t] != b.root_position[t]) return false;
  }
  for (std::size_t i = 0; i < a.joint_rotation.size(); ++i) {
    if (a.joint_rotation[i].coeffs() != b.joint_rotation[i].coeffs()) return false;
  }
  return true;
}

Motion forward_kinematics(const Skeleton& s, const RotationMotion& r) {
  require_valid(s);
  const std::size_t n = s.joint_count();
  if (r.joint_count != n || r.joint_rotation.size() != r.frame_count * n || r.root_position.size() != r.frame_count) {
    throw ShapeError("forward_kinematics: rotation motion has " + std::to_string(r.joint_count) +
                     " joints, skeleton has " + std::to_string(n));
  }
  Motion out(r.frame_count, n, r.frame_rate);
  std::vector<Quat> global(n);
  std::vector<Vec3> pos(n);
  for (std::size_t t = 0; t < r.frame_count; ++t) {
    global[0] = r.rotation(t, 0);
    pos[0] = r.root_position[t];
    for (std::size_t i = 1; i < n; ++i) {
      const auto p = static_cast<std::size_t>(s.parent[i]);
      global[i] = global[p] * r.rotation(t, i);
      const std::size_t b = bone_of_joint(i);
      pos[i] = pos[p] + global[i] * (s.bone_length[b] * s.rest_direction[b]);
    }
    for (std::size_t i = 0; i < n; ++i) out.set_position(t, i, pos[i]);
  }
  return out;
}

BoneLengthStats bone_lengths_from_motion(const Motion& m, std::span<const int> parent) {
  if (m.frame_count == 0) throw Error("bone_lengths_from_motion: empty motion");
  if (parent.size() != m.joint_count) {
    throw ShapeError("bone_lengths_from_motion: parent array has " + std::to_string(parent.size()) +
                     " entries, motion has " + std::to_string(m.joint_count) + " joints");
  }
  const std::size_t bones = m.joint_count - 1;
  BoneLengthStats stats{std::vector<double>(bones, 0.0), std::vector<double>(bones, 0.0)};
  std::vector<double> lengths(m.frame_count * bones);
  for (std::size_t t = 0; t < m.frame_count; ++t) {
    for (std::size_t j = 1; j < m.joint_count; ++j) {
      const auto p = static_cast<std::size_t>(parent[j]);
      lengths[t * bones + bone_of_joint(j)] = (m.position(t, j) - m.position(t, p)).norm();
    }
  }
  for (std::size_t b = 0; b < bones; ++b) {
    double acc = 0.0;
    for (std::size_t t = 0; t < m.frame_count; ++t) acc += lengths[t * bones + b];
    stats.mean[b] = acc / static_cast<double>(m.frame_count);
    for (std::size_t t = 0; t < m.frame_count; ++t) {
      stats.max_deviation[b] = std::max(stats.max_deviation[b], std::abs(lengths[t * bones + b] - stats.mean[b]));
    }
  }
  return stats;
}

Motion root_center(const Motion& m) {
  Motion out = m;
  for (std::size_t t = 0; t < m.frame_count; ++t) {
    const double* root = m.positions.data() + t * m.joint_count * 3;
    double* dst = out.positions.data() + t * m.joint_count * 3;
    for (std::size_t j = 0; j < m.joint_count; ++j) {
      for (std::size_t c = 0; c < 3; ++c) dst[j * 3 + c] = root[j * 3 + c] - root[c];
    }
  }
  return out;
}

Quat quat_from_euler_deg(std::string_view axes, std::span<const double> degrees) {
  if (axes.size() != degrees.size()) throw Error("quat_from_euler_deg: axis/angle count mismatch");
  Quat q = Quat::Identity();
  for (std::size_t k = 0; k < axes.size(); ++k) {
    Vec3 axis;
    switch (axes[k]) {
      case 'X': axis = Vec3::UnitX(); break;
      case 'Y': axis = Vec3::UnitY(); break;
      case 'Z': axis = Vec3::UnitZ(); break;
      default: throw Error(std::string("quat_from_euler_deg: unknown axis '") + axes[k] + "'");
    }
    q = q * Quat(Eigen::AngleAxisd(degrees[k] * M_PI / 180.0, axis));
  }
  return q.normalized();
}

Quat scale_rotation(const Quat& q, double factor) {
  return Quat::Identity().slerp(factor, q).normalized();
}

namespace {

struct JointSpec {
  const char* name;
  int parent;
  double dx, dy, dz;
  double length;
};

Skeleton from_table(std::span<const JointSpec> table) {
  Skeleton s;
  for (const JointSpec& j : table) {
    s.parent.push_back(j.parent);
    s.joint_name.emplace_back(j.name);
    if (j.parent != kNoParent) {
      s.rest_direction.push_back(Vec3(j.dx, j.dy, j.dz).normalized());
      s.bone_length.push_back(j.length);
    }
  }
  return s;
}

constexpr JointSpec kHumanoid5[] = {
    {"hips", kNoParent, 0, 0, 0, 0},   {"spine", 0, 0, 1, 0, 0.5},     {"head", 1, 0, 1, 0, 0.25},
    {"l_arm", 1, 1, -0.2, 0, 0.6},     {"r_arm", 1, -1, -0.2, 0, 0.6},
};

constexpr JointSpec kHumanoid8[] = {
    {"hips", kNoParent, 0, 0, 0, 0},  {"spine", 0, 0, 1, 0, 0.45},   {"neck", 1, 0, 1, 0, 0.15},
    {"head", 2, 0, 1, 0, 0.2},        {"l_arm", 1, 1, -0.3, 0, 0.55}, {"r_arm", 1, -1, -0.3, 0, 0.55},
    {"l_leg", 0, 0.2, -1, 0, 0.85},   {"r_leg", 0, -0.2, -1, 0, 0.85},
};

constexpr JointSpec kHumanoid15[] = {
    {"hips", kNoParent, 0, 0, 0, 0},      {"spine", 0, 0, 1, 0, 0.25},         {"chest", 1, 0, 1, 0, 0.25},
    {"neck", 2, 0, 1, 0, 0.12},           {"head", 3, 0, 1, 0, 0.18},          {"l_upperarm", 2, 1, -0.1, 0, 0.3},
    {"l_forearm", 5, 1, 0, 0, 0.27},      {"r_upperarm", 2, -1, -0.1, 0, 0.3}, {"r_forearm", 7, -1, 0, 0, 0.27},
    {"l_thigh", 0, 0.15, -1, 0, 0.45},    {"l_shin", 9, 0, -1, 0, 0.43},       {"l_foot", 10, 0, -0.3, 1, 0.15},
    {"r_thigh", 0, -0.15, -1, 0, 0.45},   {"r_shin", 12, 0, -1, 0, 0.43},      {"r_foot", 13, 0, -0.3, 1, 0.15},
};

}  // namespace

Skeleton canonical_skeleton(std::size_t joints) {
  switch (joints) {
    case 5: return from_table(kHumanoid5);
    case 8: return from_table(kHumanoid8);
    case 15: return from_table(kHumanoid15);
    default: break;
  }
  if (joints < 2) throw Error("canonical_skeleton: need at least 2 joints");
  // Binary tree with bones fanning out around the +Y axis.
  Skeleton s;
  s.parent.push_back(kNoParent);
  s.joint_name.emplace_back("j0");
  for (std::size_t i = 1; i < joints; ++i) {
    s.parent.push_back(static_cast<int>((i - 1) / 2));
    s.joint_name.push_back("j" + std::to_string(i));
    const double angle = 0.7 * static_cast<double>(i);
    s.rest_direction.push_back(Vec3(std::sin(angle), 1.0, std::cos(angle)).normalized());
    s.bone_length.push_back(0.2 + 0.05 * static_cast<double>(i % 4));
  }
  return s;
}

}  // namespace mrt
