#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "mrt/error.hpp"
#include "mrt/motiondata.hpp"

using namespace mrt;
namespace fs = std::filesystem;

namespace {

fs::path data_dir() { return fs::path(MRT_TEST_DATA_DIR); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("mrt_test_" + tag + "_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Independent rotation-copy: keep each bone's world direction from the source,
// rebuild with the target's lengths from the source root.
Motion copy_directions(const Motion& src, const Skeleton& target) {
  Motion out(src.frame_count, src.joint_count, src.frame_rate);
  for (std::size_t t = 0; t < src.frame_count; ++t) {
    out.set_position(t, 0, src.position(t, 0));
    for (std::size_t j = 1; j < src.joint_count; ++j) {
      const auto p = static_cast<std::size_t>(target.parent[j]);
      const Vec3 dir = (src.position(t, j) - src.position(t, p)).normalized();
      out.set_position(t, j, out.position(t, p) + target.bone_length[j - 1] * dir);
    }
  }
  return out;
}

void check_positions(const BvhClip& clip, std::size_t frame, const std::vector<Vec3>& expect) {
  const Motion m = forward_kinematics(clip.skeleton, clip.motion);
  REQUIRE(m.joint_count == expect.size());
  for (std::size_t j = 0; j < expect.size(); ++j) {
    CAPTURE(frame);
    CAPTURE(j);
    CHECK((m.position(frame, j) - expect[j]).norm() <= 1e-6);
  }
}

}  // namespace

TEST_CASE("character family") {
  const Skeleton canon = canonical_skeleton(8);
  const auto same = generate_character_family(canon, 4, 1.0, 1.0, 3);
  for (const auto& c : same) CHECK(c.skeleton == canon);

  const auto a = generate_character_family(canon, 25, 0.7, 1.3, 11);
  const auto b = generate_character_family(canon, 25, 0.7, 1.3, 11);
  CHECK(a == b);
  std::set<std::string> ids;
  for (const auto& c : a) {
    ids.insert(c.id);
    CHECK(c.skeleton.parent == canon.parent);
    CHECK(c.skeleton.rest_direction == canon.rest_direction);
    for (std::size_t k = 0; k < canon.bone_count(); ++k) {
      const double u = c.skeleton.bone_length[k] / canon.bone_length[k];
      CHECK(u >= 0.7 - 1e-12);
      CHECK(u <= 1.3 + 1e-12);
    }
    for (double f : c.flexibility) CHECK((f > 0.0 && f <= 1.0));
  }
  CHECK(ids.size() == 25);

  CHECK_THROWS_AS(generate_character_family(canon, 2, 1.2, 1.1, 0), Error);
  CHECK_THROWS_AS(generate_character_family(canon, 2, 0.0, 1.1, 0), Error);
  CHECK_THROWS_AS(generate_character_family(canon, 0, 1.0, 1.1, 0), Error);
}

TEST_CASE("rotation clips") {
  const Skeleton canon = canonical_skeleton(5);
  const RotationMotion one = generate_rotation_clip(canon, 1, 5);
  CHECK(one.frame_count == 1);
  for (const Quat& q : one.joint_rotation) CHECK(std::abs(q.norm() - 1.0) <= 1e-9);
  CHECK(rotation_motion_equal(generate_rotation_clip(canon, 30, 9), generate_rotation_clip(canon, 30, 9)));
  CHECK_FALSE(rotation_motion_equal(generate_rotation_clip(canon, 30, 9), generate_rotation_clip(canon, 30, 10)));

  double max_excursion = 0.0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    for (double a : generate_euler_tracks(15, 40, seed)) max_excursion = std::max(max_excursion, std::abs(a));
  }
  CHECK(max_excursion <= kMaxEulerDeg);
  CHECK(max_excursion > 0.5 * kMaxEulerDeg);
}

TEST_CASE("dataset counting contract and invariants") {
  const Skeleton canon = canonical_skeleton(8);
  const auto family = generate_character_family(canon, 8, 0.7, 1.3, 1);
  SynthesisOptions o;
  o.seed = 5;
  const Dataset d = synthesize_dataset(family, o);
  std::size_t train = 0, test = 0;
  for (const auto& c : d.clips) (c.split == Split::train ? train : test)++;
  CHECK(train == 120);
  CHECK(test == 24);
  CHECK(d.characters_in(Split::train).size() == 6);
  CHECK(d.characters_in(Split::test).size() == 2);

  // No rotation seed is shared between train characters.
  std::map<std::uint64_t, std::string> owner;
  for (const auto& c : d.clips) {
    if (c.split != Split::train) continue;
    auto [it, fresh] = owner.emplace(c.seed, c.character_id);
    CHECK((fresh || it->second == c.character_id));
  }
  for (const auto& key : d.pairing_keys()) {
    std::size_t members = 0;
    for (const auto& c : d.clips) members += c.pairing_key == key;
    CHECK(members == 2);
  }

  CHECK(datasets_equal(d, synthesize_dataset(family, o)));
  CHECK_THROWS_AS(synthesize_dataset(std::vector(family.begin(), family.begin() + 7), o), Error);
}

TEST_CASE("large-scale split sizes") {
  const auto family = generate_character_family(canonical_skeleton(5), 29, 0.7, 1.3, 2);
  SynthesisOptions o;
  o.train_chars = 25;
  o.clips_per_train_char = 32;
  o.test_chars = 4;
  o.test_motions = 110;
  o.frames = 4;
  const Dataset d = synthesize_dataset(family, o);
  std::size_t train = 0, test = 0;
  for (const auto& c : d.clips) (c.split == Split::train ? train : test)++;
  CHECK(train == 800);
  CHECK(test == 440);
}

TEST_CASE("exact mode makes direction copy a perfect retarget") {
  const auto family = generate_character_family(canonical_skeleton(15), 4, 0.7, 1.3, 8);
  SynthesisOptions o;
  o.train_chars = 2;
  o.clips_per_train_char = 1;
  o.test_chars = 2;
  o.test_motions = 6;
  o.seed = 21;
  const Dataset d = synthesize_dataset(family, o);
  double worst = 0.0;
  for (const auto& a : d.clips) {
    for (const auto& b : d.clips) {
      if (a.split != Split::test || b.split != Split::test || a.pairing_key != b.pairing_key) continue;
      const Motion got = root_center(copy_directions(a.motion, d.character(b.character_id).skeleton));
      const Motion want = root_center(b.motion);
      for (std::size_t i = 0; i < got.positions.size(); ++i) {
        worst = std::max(worst, std::abs(got.positions[i] - want.positions[i]));
      }
    }
  }
  CHECK(worst <= 1e-9);

  o.mode = DatasetMode::flexibility;
  const Dataset f = synthesize_dataset(family, o);
  for (const auto& c : f.clips) {
    const auto& flex = f.character(c.character_id).flexibility;
    const RotationMotion base = generate_rotation_clip(family[0].skeleton, o.frames, c.seed);
    for (std::size_t j = 0; j < base.joint_count; ++j) {
      const double full = base.rotation(3, j).angularDistance(Quat::Identity());
      const double scaled = c.rotations->rotation(3, j).angularDistance(Quat::Identity());
      CHECK(std::abs(scaled - flex[j] * full) <= 1e-9);
    }
  }
}

TEST_CASE("clip and dataset files round-trip") {
  TempDir tmp("io");
  const auto family = generate_character_family(canonical_skeleton(8), 5, 0.7, 1.3, 4);
  SynthesisOptions o;
  o.train_chars = 3;
  o.test_chars = 2;
  o.clips_per_train_char = 3;
  o.test_motions = 2;
  o.frames = 10;
  o.seed = 99;
  const Dataset d = synthesize_dataset(family, o);
  write_dataset(tmp.path / "ds", d);
  CHECK(datasets_equal(read_dataset(tmp.path / "ds"), d));

  ClipFile clip{family[0].skeleton, d.clips[0].motion, std::nullopt};
  write_clip(tmp.path / "one.clip", clip);
  const ClipFile back = read_clip(tmp.path / "one.clip");
  CHECK(back.skeleton == clip.skeleton);
  CHECK(back.motion == clip.motion);
  CHECK_FALSE(back.rotations.has_value());

  SUBCASE("train clip listed under two characters") {
    std::string manifest = slurp(tmp.path / "ds" / "manifest.txt");
    const std::string line = "clip train_0000 char_00 train - ";
    const auto at = manifest.find(line);
    REQUIRE(at != std::string::npos);
    const auto eol = manifest.find('\n', at);
    std::string dup = manifest.substr(at, eol - at + 1);
    dup.replace(dup.find("char_00"), 7, "char_01");
    manifest.insert(eol + 1, dup);
    const auto count_at = manifest.find("clips ");
    manifest.replace(count_at, manifest.find('\n', count_at) - count_at, "clips " + std::to_string(d.clips.size() + 1));
    spit(tmp.path / "ds" / "manifest.txt", manifest);
    try {
      read_dataset(tmp.path / "ds");
      FAIL("expected an invariant error");
    } catch (const InvariantError& e) {
      CHECK(e.invariant() == "unpaired-train");
    }
  }
  SUBCASE("truncated manifest names the missing section") {
    std::string manifest = slurp(tmp.path / "ds" / "manifest.txt");
    manifest.resize(manifest.find("clips "));
    spit(tmp.path / "ds" / "manifest.txt", manifest);
    try {
      read_dataset(tmp.path / "ds");
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("missing section 'clips'") != std::string::npos);
    }
  }
  SUBCASE("truncated clip file names the missing section") {
    std::string text = slurp(tmp.path / "one.clip");
    text.resize(text.find("frame_rate"));
    CHECK_THROWS_WITH_AS(parse_clip(text), doctest::Contains("missing section 'frame_rate'"), ParseError);
    text = slurp(tmp.path / "one.clip");
    text.resize(text.size() / 2);
    text.resize(text.rfind('\n') + 1);
    CHECK_THROWS_WITH_AS(parse_clip(text), doctest::Contains("missing rows in section 'frames'"), ParseError);
  }
  SUBCASE("schema version mismatch") {
    std::string text = slurp(tmp.path / "one.clip");
    text.replace(0, 10, "mrt-clip 7");
    CHECK_THROWS_WITH_AS(parse_clip(text), doctest::Contains("schema version mismatch"), ParseError);
  }
  SUBCASE("lengths files") {
    write_lengths(tmp.path / "len.txt", family[1].skeleton.bone_length);
    CHECK(read_lengths(tmp.path / "len.txt") == family[1].skeleton.bone_length);
    CHECK(read_lengths(tmp.path / "one.clip") == family[0].skeleton.bone_length);
  }
  CHECK_THROWS_AS(read_clip(tmp.path / "missing.clip"), IoError);
}

TEST_CASE("bvh corpus matches hand-computed positions") {
  const BvhClip id = read_bvh(data_dir() / "bvh" / "identity_chain.bvh");
  CHECK(id.skeleton.joint_count() == 3);
  CHECK(std::abs(id.motion.frame_rate - 1.0 / 0.0333333) < 1e-9);
  check_positions(id, 0, {{0, 0, 0}, {0, 1, 0}, {0, 2, 0}});
  check_positions(id, 1, {{0, 0, 0}, {0, 1, 0}, {0, 2, 0}});

  const BvhClip rz = read_bvh(data_dir() / "bvh" / "root_z90.bvh");
  CHECK(rz.skeleton.joint_name == std::vector<std::string>{"base", "mid", "mid_end"});
  check_positions(rz, 0, {{0, 0, 0}, {-1, 0, 0}, {-2, 0, 0}});

  const BvhClip body = read_bvh(data_dir() / "bvh" / "small_body.bvh");
  CHECK(body.skeleton.parent == std::vector<int>{-1, 0, 1, 2, 0, 4});
  check_positions(body, 0, {{1, 2, 3}, {1, 3, 3}, {1, 3.5, 3}, {1, 3.7, 3}, {1.2, 1, 3}, {1.2, 0, 3}});
  check_positions(body, 1, {{0, 0, 0}, {0, 1, 0}, {0, 1, 0.5}, {0, 1, 0.7}, {0.2, -1, 0}, {0.2, -2, 0}});
  check_positions(body, 2, {{0, 0, 0}, {0, 1, 0}, {0, 1, 0.5}, {0, 1, 0.7}, {0, -1, -0.2}, {0, -2, -0.2}});
}

TEST_CASE("bvh errors are positioned") {
  const std::string good = slurp(data_dir() / "bvh" / "root_z90.bvh");
  auto error_line = [](const std::string& text) -> std::size_t {
    try {
      parse_bvh(text);
    } catch (const ParseError& e) {
      return e.line();
    }
    return 0;
  };

  std::string extra = good + "0 0 0 0 0 0 0 0 0\n";
  CHECK(error_line(extra) == 20);
  std::string short_rows = good;
  short_rows.replace(short_rows.find("Frames: 1"), 9, "Frames: 2");
  CHECK(error_line(short_rows) == 19);

  std::string unknown = good;
  unknown.replace(unknown.find("End Site"), 8, "Foo Site");
  CHECK(error_line(unknown) == 10);

  std::string zero = good;
  zero.replace(zero.find("OFFSET 0.0 1.0 0.0"), 18, "OFFSET 0.0 0.0 0.0");
  CHECK(error_line(zero) == 8);

  std::string mismatch = good;
  mismatch.replace(mismatch.rfind("0 0 0 90"), 8, "0 0 90");
  CHECK(error_line(mismatch) == 19);

  std::string channels = good;
  channels.replace(channels.find("CHANNELS 3"), 10, "CHANNELS 4");
  CHECK(error_line(channels) == 9);
}

TEST_CASE("bvh parser is total under mutation") {
  std::vector<std::string> corpus;
  for (const char* f : {"identity_chain.bvh", "root_z90.bvh", "small_body.bvh"}) {
    corpus.push_back(slurp(data_dir() / "bvh" / f));
  }
  const std::vector<std::string> junk{"{", "}", "JOINT", "End", "ROOT", "CHANNELS", "OFFSET", "MOTION", "nan",
                                      "1e999", "-0", "abc", "7", "3", "Frames:", "\n", "0.0", "1e-200"};
  std::mt19937_64 rng(2024);
  int ok = 0, positioned = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::string text = corpus[rng() % corpus.size()];
    const int edits = 1 + static_cast<int>(rng() % 3);
    for (int e = 0; e < edits && !text.empty(); ++e) {
      const std::size_t at = rng() % text.size();
      switch (rng() % 6) {
        case 0: text.erase(at, 1 + rng() % 8); break;
        case 1: text.insert(at, junk[rng() % junk.size()] + " "); break;
        case 2: text.resize(at); break;
        case 3: text.insert(at, text.substr(at, rng() % 40)); break;
        case 4: text[at] = static_cast<char>(rng() % 128); break;
        default: {
          const std::size_t d = text.find_first_of("0123456789", at);
          if (d != std::string::npos) text[d] = static_cast<char>('0' + rng() % 10);
        }
      }
    }
    CAPTURE(trial);
    try {
      const BvhClip clip = parse_bvh(text);
      CHECK_FALSE(validate_skeleton(clip.skeleton).has_value());
      CHECK(clip.motion.frame_count >= 1);
      const Motion m = forward_kinematics(clip.skeleton, clip.motion);
      for (double v : m.positions) REQUIRE(std::isfinite(v));
      ++ok;
    } catch (const ParseError& e) {
      CHECK(e.line() >= 1);
      ++positioned;
    }
  }
  MESSAGE("mutations parsed " << ok << ", rejected with position " << positioned);
  CHECK(ok + positioned == 1000);
  CHECK(positioned > 500);
}
