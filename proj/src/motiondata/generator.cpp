#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "mrt/error.hpp"
#include "mrt/motiondata.hpp"
#include "mrt/random.hpp"

namespace mrt {

namespace {

constexpr double kTwoPi = 6.283185307179586;

std::string character_id(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "char_%02zu", k);
  return buf;
}

// One axis: 1-3 sinusoids whose amplitudes are split from a total <= limit.
struct Wave {
  double amplitude, frequency, phase;
};

std::vector<Wave> draw_waves(Rng& rng, double limit, double f_lo, double f_hi) {
  const std::size_t count = 1 + uniform_index(rng, 3);
  const double total = uniform(rng, 0.0, limit);
  std::vector<double> share(count);
  double sum = 0.0;
  for (double& s : share) sum += (s = uniform(rng, 0.1, 1.0));
  std::vector<Wave> waves(count);
  for (std::size_t k = 0; k < count; ++k) {
    waves[k] = {total * share[k] / sum, uniform(rng, f_lo, f_hi), uniform(rng, 0.0, kTwoPi)};
  }
  return waves;
}

double eval_waves(const std::vector<Wave>& waves, double seconds) {
  double v = 0.0;
  for (const Wave& w : waves) v += w.amplitude * std::sin(kTwoPi * w.frequency * seconds + w.phase);
  return v;
}

}  // namespace

std::vector<CharacterSpec> generate_character_family(const Skeleton& canonical, std::size_t count,
                                                     double scale_min, double scale_max, std::uint64_t seed) {
  require_valid(canonical);
  if (count < 1) throw Error("generate_character_family: count must be at least 1");
  if (!(scale_min > 0.0) || !(scale_max > 0.0)) throw Error("generate_character_family: scale bounds must be positive");
  if (scale_min > scale_max) throw Error("generate_character_family: empty scale range");

  Rng rng(seed);
  std::vector<CharacterSpec> family;
  family.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    CharacterSpec c{character_id(k), canonical, {}};
    for (double& len : c.skeleton.bone_length) len *= uniform(rng, scale_min, scale_max);
    c.flexibility.resize(canonical.joint_count());
    for (double& f : c.flexibility) f = uniform(rng, 0.6, 1.0);
    family.push_back(std::move(c));
  }
  return family;
}

std::vector<double> generate_euler_tracks(std::size_t joints, std::size_t frames, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> angles(frames * joints * 3);
  for (std::size_t j = 0; j < joints; ++j) {
    for (std::size_t axis = 0; axis < 3; ++axis) {
      const auto waves = draw_waves(rng, kMaxEulerDeg, 0.2, 2.0);
      for (std::size_t t = 0; t < frames; ++t) {
        angles[(t * joints + j) * 3 + axis] = eval_waves(waves, static_cast<double>(t) / kClipFrameRate);
      }
    }
  }
  return angles;
}

RotationMotion generate_rotation_clip(const Skeleton& canonical, std::size_t frames, std::uint64_t seed) {
  require_valid(canonical);
  if (frames < 1) throw Error("generate_rotation_clip: need at least one frame");
  const std::size_t n = canonical.joint_count();
  const std::vector<double> angles = generate_euler_tracks(n, frames, seed);

  RotationMotion r(frames, n, kClipFrameRate);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t j = 0; j < n; ++j) {
      r.rotation(t, j) = quat_from_euler_deg("XYZ", std::span(angles).subspan((t * n + j) * 3, 3));
    }
  }

  // Slow wandering root: horizontal drift up to 0.5 m, a small vertical bob.
  Rng rng(derive_seed(seed, 0x726f6f74));
  const auto wx = draw_waves(rng, 0.5, 0.05, 0.3);
  const auto wy = draw_waves(rng, 0.05, 0.5, 2.0);
  const auto wz = draw_waves(rng, 0.5, 0.05, 0.3);
  for (std::size_t t = 0; t < frames; ++t) {
    const double s = static_cast<double>(t) / kClipFrameRate;
    r.root_position[t] = Vec3(eval_waves(wx, s), 1.0 + eval_waves(wy, s), eval_waves(wz, s));
  }
  return r;
}

std::string to_string(DatasetMode mode) { return mode == DatasetMode::exact ? "exact" : "flexibility"; }

DatasetMode parse_dataset_mode(std::string_view s) {
  if (s == "exact") return DatasetMode::exact;
  if (s == "flexibility") return DatasetMode::flexibility;
  throw Error("unknown dataset mode '" + std::string(s) + "' (expected exact or flexibility)");
}

std::string to_string(Split split) { return split == Split::train ? "train" : "test"; }

const CharacterSpec& Dataset::character(std::string_view cid) const {
  for (const CharacterSpec& c : characters) {
    if (c.id == cid) return c;
  }
  throw Error("dataset has no character '" + std::string(cid) + "'");
}

std::vector<std::string> Dataset::characters_in(Split split) const {
  std::vector<std::string> ids;
  for (const ClipRecord& c : clips) {
    if (c.split == split && std::find(ids.begin(), ids.end(), c.character_id) == ids.end()) ids.push_back(c.character_id);
  }
  return ids;
}

std::vector<std::string> Dataset::pairing_keys() const {
  std::vector<std::string> keys;
  for (const ClipRecord& c : clips) {
    if (c.split == Split::test && std::find(keys.begin(), keys.end(), c.pairing_key) == keys.end()) {
      keys.push_back(c.pairing_key);
    }
  }
  return keys;
}

bool datasets_equal(const Dataset& a, const Dataset& b) {
  if (a.id != b.id || a.mode != b.mode || a.characters != b.characters || a.clips.size() != b.clips.size()) return false;
  for (std::size_t i = 0; i < a.clips.size(); ++i) {
    const ClipRecord& x = a.clips[i];
    const ClipRecord& y = b.clips[i];
    if (x.clip_id != y.clip_id || x.character_id != y.character_id || x.split != y.split ||
        x.pairing_key != y.pairing_key || x.seed != y.seed || !(x.motion == y.motion) ||
        x.rotations.has_value() != y.rotations.has_value()) {
      return false;
    }
    if (x.rotations && !rotation_motion_equal(*x.rotations, *y.rotations)) return false;
  }
  return true;
}

void validate_dataset(const Dataset& d) {
  auto fail = [](const char* inv, const std::string& msg) { throw InvariantError(inv, msg); };

  std::set<std::string> char_ids;
  for (const CharacterSpec& c : d.characters) {
    if (!char_ids.insert(c.id).second) fail("character", "duplicate character id '" + c.id + "'");
    if (auto issue = validate_skeleton(c.skeleton)) fail("character", c.id + ": " + issue->message);
    if (c.flexibility.size() != c.skeleton.joint_count()) fail("character", c.id + ": flexibility count mismatch");
    for (double f : c.flexibility) {
      if (!(f > 0.0 && f <= 1.0)) fail("character", c.id + ": flexibility outside (0, 1]");
    }
  }

  // Within the train split a clip id or seed may belong to one character only.
  std::map<std::string, std::string> train_owner;
  std::map<std::uint64_t, std::string> seed_owner;
  for (const ClipRecord& c : d.clips) {
    if (c.split != Split::train) continue;
    auto [it, fresh] = train_owner.emplace(c.clip_id, c.character_id);
    if (!fresh && it->second != c.character_id) {
      fail("unpaired-train", "train clip '" + c.clip_id + "' listed under '" + it->second + "' and '" + c.character_id + "'");
    }
    auto [st, sfresh] = seed_owner.emplace(c.seed, c.character_id);
    if (!sfresh && st->second != c.character_id) {
      fail("unpaired-train", "train motion seed " + std::to_string(c.seed) + " shared by '" + st->second + "' and '" +
                                 c.character_id + "'");
    }
  }

  const auto train_chars = d.characters_in(Split::train);
  const auto test_chars = d.characters_in(Split::test);
  for (const std::string& id : test_chars) {
    if (std::find(train_chars.begin(), train_chars.end(), id) != train_chars.end()) {
      fail("disjoint-characters", "character '" + id + "' appears in both train and test splits");
    }
  }

  std::map<std::string, std::vector<std::string>> members;
  for (const ClipRecord& c : d.clips) {
    if (c.split != Split::test) continue;
    if (c.pairing_key.empty()) fail("paired-test", "test clip '" + c.clip_id + "' has no pairing key");
    members[c.pairing_key].push_back(c.character_id);
  }
  for (auto& [key, chars] : members) {
    std::sort(chars.begin(), chars.end());
    auto expect = test_chars;
    std::sort(expect.begin(), expect.end());
    if (chars != expect) {
      fail("paired-test", "pairing key '" + key + "' does not map to exactly one clip per held-out character");
    }
  }

  std::set<std::string> clip_ids;
  for (const ClipRecord& c : d.clips) {
    if (!clip_ids.insert(c.clip_id).second) fail("unique-clip-id", "clip id '" + c.clip_id + "' used twice");
    if (!char_ids.contains(c.character_id)) {
      fail("unknown-character", "clip '" + c.clip_id + "' references unknown character '" + c.character_id + "'");
    }
    const Skeleton& s = d.character(c.character_id).skeleton;
    if (c.motion.joint_count != s.joint_count() ||
        c.motion.positions.size() != c.motion.frame_count * c.motion.joint_count * 3) {
      fail("joint-count", "clip '" + c.clip_id + "' does not match its character's skeleton");
    }
    if (c.rotations && (c.rotations->joint_count != s.joint_count() || c.rotations->frame_count != c.motion.frame_count)) {
      fail("joint-count", "clip '" + c.clip_id + "' rotations do not match its positions");
    }
    for (double v : c.motion.positions) {
      if (!std::isfinite(v)) fail("finite", "clip '" + c.clip_id + "' has a non-finite position");
    }
  }
}

namespace {

Motion realize(const CharacterSpec& c, const RotationMotion& base, DatasetMode mode, RotationMotion* used) {
  RotationMotion r = base;
  if (mode == DatasetMode::flexibility) {
    for (std::size_t t = 0; t < r.frame_count; ++t) {
      for (std::size_t j = 0; j < r.joint_count; ++j) r.rotation(t, j) = scale_rotation(r.rotation(t, j), c.flexibility[j]);
    }
  }
  Motion m = forward_kinematics(c.skeleton, r);
  if (used) *used = std::move(r);
  return m;
}

std::string indexed(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%04zu", prefix, i);
  return buf;
}

}  // namespace

Dataset synthesize_dataset(const std::vector<CharacterSpec>& family, const SynthesisOptions& o) {
  if (o.train_chars + o.test_chars > family.size()) {
    throw Error("synthesize_dataset: need " + std::to_string(o.train_chars + o.test_chars) + " characters, family has " +
                std::to_string(family.size()));
  }
  if (o.frames < 1) throw Error("synthesize_dataset: need at least one frame per clip");
  const Skeleton& canonical = family.front().skeleton;

  Dataset d;
  d.id = "synthetic-" + to_string(o.mode) + "-" + std::to_string(o.seed);
  d.mode = o.mode;
  d.characters.assign(family.begin(), family.begin() + static_cast<std::ptrdiff_t>(o.train_chars + o.test_chars));

  std::uint64_t stream = 0;
  for (std::size_t k = 0; k < o.train_chars; ++k) {
    const CharacterSpec& c = family[k];
    for (std::size_t i = 0; i < o.clips_per_train_char; ++i) {
      ClipRecord rec;
      rec.seed = derive_seed(o.seed, stream);
      rec.clip_id = indexed("train_", stream++);
      rec.character_id = c.id;
      rec.split = Split::train;
      RotationMotion used;
      rec.motion = realize(c, generate_rotation_clip(canonical, o.frames, rec.seed), o.mode, &used);
      rec.rotations = std::move(used);
      d.clips.push_back(std::move(rec));
    }
  }
  for (std::size_t m = 0; m < o.test_motions; ++m) {
    const std::uint64_t seed = derive_seed(o.seed, stream++);
    const RotationMotion base = generate_rotation_clip(canonical, o.frames, seed);
    const std::string key = indexed("m", m);
    for (std::size_t k = o.train_chars; k < o.train_chars + o.test_chars; ++k) {
      ClipRecord rec;
      rec.seed = seed;
      rec.clip_id = "test_" + key + "_" + family[k].id;
      rec.character_id = family[k].id;
      rec.split = Split::test;
      rec.pairing_key = key;
      RotationMotion used;
      rec.motion = realize(family[k], base, o.mode, &used);
      rec.rotations = std::move(used);
      d.clips.push_back(std::move(rec));
    }
  }
  validate_dataset(d);
  return d;
}

}  // namespace mrt
