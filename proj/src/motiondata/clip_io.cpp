// Text clip format (one record per line, whitespace separated):
//
//   mrt-clip 1
//   joints N
//   names n0 .. nN-1
//   parents -1 p1 .. pN-1
//   directions (N-1) x 3 values
//   lengths (N-1) values
//   frame_rate f
//   frames T
//   T lines of N x 3 positions
//   [rotations T, then T lines of root xyz + N quaternions w x y z]
//   end
//
// A dataset directory holds manifest.txt (characters, then one line per clip
// with id, character, split, pairing key, seed) and clips/<clip_id>.clip.

#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "mrt/error.hpp"
#include "mrt/motiondata.hpp"
#include "mrt/text.hpp"

namespace mrt {

namespace {

void put(std::string& out, double v) { out += format_number(v); }

template <typename It>
void put_row(std::string& out, const char* key, It first, It last) {
  out += key;
  for (It it = first; it != last; ++it) {
    out += ' ';
    put(out, *it);
  }
  out += '\n';
}

bool token_safe(std::string_view s) {
  if (s.empty()) return false;
  for (char c : s) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) return false;
  }
  return true;
}

void require_token(std::string_view what, std::string_view s) {
  if (!token_safe(s)) throw Error(std::string(what) + " '" + std::string(s) + "' must be non-empty [A-Za-z0-9_.-]");
}

void put_skeleton(std::string& out, const Skeleton& s) {
  out += "joints " + std::to_string(s.joint_count()) + "\n";
  out += "names";
  for (std::size_t i = 0; i < s.joint_count(); ++i) {
    const std::string name = s.joint_name.empty() ? "j" + std::to_string(i) : s.joint_name[i];
    require_token("joint name", name);
    out += ' ' + name;
  }
  out += "\nparents";
  for (int p : s.parent) out += ' ' + std::to_string(p);
  out += "\ndirections";
  for (const Vec3& d : s.rest_direction) {
    for (int k = 0; k < 3; ++k) {
      out += ' ';
      put(out, d[k]);
    }
  }
  out += '\n';
  put_row(out, "lengths", s.bone_length.begin(), s.bone_length.end());
}

// Line cursor that reports positions and missing sections.
class Reader {
 public:
  explicit Reader(std::string_view text) {
    std::size_t start = 0;
    while (start < text.size()) {
      std::size_t end = text.find('\n', start);
      if (end == std::string_view::npos) end = text.size();
      std::string_view line = text.substr(start, end - start);
      if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
      lines_.push_back(line);
      start = end + 1;
    }
  }

  std::size_t line() const { return index_; }
  bool done() const { return index_ >= lines_.size(); }

  // Tokens of the next line; the first must equal key.
  std::vector<std::string_view> keyed(std::string_view key) {
    if (done()) throw ParseError(index_ + 1, "missing section '" + std::string(key) + "'");
    auto toks = split(lines_[index_++]);
    if (toks.empty() || toks[0] != key) {
      throw ParseError(index_, "expected section '" + std::string(key) + "'");
    }
    toks.erase(toks.begin());
    return toks;
  }

  std::vector<std::string_view> row(std::string_view section, std::size_t i, std::size_t count) {
    if (done()) {
      throw ParseError(index_ + 1, "missing rows in section '" + std::string(section) + "': expected " +
                                       std::to_string(count) + ", found " + std::to_string(i));
    }
    return split(lines_[index_++]);
  }

  bool peek(std::string_view key) const {
    if (done()) return false;
    auto toks = split(lines_[index_]);
    return !toks.empty() && toks[0] == key;
  }

  [[noreturn]] void fail(const std::string& msg) const { throw ParseError(index_, msg); }

  double number(std::string_view t) const {
    const auto v = parse_number(t);
    if (!v) fail("expected a finite number, found '" + std::string(t) + "'");
    return *v;
  }

  template <typename Int>
  Int integer(std::string_view t) const {
    const auto v = parse_integer<Int>(t);
    if (!v) fail("expected an integer, found '" + std::string(t) + "'");
    return *v;
  }

  void arity(const std::vector<std::string_view>& toks, std::size_t n, std::string_view what) const {
    if (toks.size() != n) {
      fail(std::string(what) + ": expected " + std::to_string(n) + " values, found " + std::to_string(toks.size()));
    }
  }

  std::string_view single(std::string_view key) {
    auto toks = keyed(key);
    arity(toks, 1, key);
    return toks[0];
  }

 private:
  static std::vector<std::string_view> split(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
      const std::size_t s = i;
      while (i < line.size() && line[i] != ' ' && line[i] != '\t') ++i;
      if (i > s) out.push_back(line.substr(s, i - s));
    }
    return out;
  }

  std::vector<std::string_view> lines_;
  std::size_t index_ = 0;
};

void check_header(Reader& r, std::string_view magic, int version) {
  auto toks = r.keyed(magic);
  r.arity(toks, 1, magic);
  const int v = r.integer<int>(toks[0]);
  if (v != version) {
    r.fail("schema version mismatch: file has " + std::to_string(v) + ", reader supports " + std::to_string(version));
  }
}

Skeleton read_skeleton(Reader& r) {
  const auto n = r.integer<std::size_t>(r.single("joints"));
  if (n < 2) r.fail("a skeleton needs at least 2 joints");
  Skeleton s;
  auto names = r.keyed("names");
  r.arity(names, n, "names");
  for (auto nm : names) s.joint_name.emplace_back(nm);
  auto parents = r.keyed("parents");
  r.arity(parents, n, "parents");
  for (auto p : parents) s.parent.push_back(r.integer<int>(p));
  auto dirs = r.keyed("directions");
  r.arity(dirs, (n - 1) * 3, "directions");
  for (std::size_t b = 0; b + 1 < n; ++b) {
    s.rest_direction.emplace_back(r.number(dirs[b * 3]), r.number(dirs[b * 3 + 1]), r.number(dirs[b * 3 + 2]));
  }
  auto lens = r.keyed("lengths");
  r.arity(lens, n - 1, "lengths");
  for (auto l : lens) s.bone_length.push_back(r.number(l));
  if (auto issue = validate_skeleton(s)) throw InvariantError(issue->invariant, issue->message);
  return s;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out << text;
  out.close();
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

std::string format_clip(const ClipFile& clip) {
  require_valid(clip.skeleton);
  const Motion& m = clip.motion;
  if (m.joint_count != clip.skeleton.joint_count() || m.positions.size() != m.frame_count * m.joint_count * 3) {
    throw ShapeError("format_clip: motion does not match skeleton");
  }
  std::string out = "mrt-clip " + std::to_string(kClipSchemaVersion) + "\n";
  put_skeleton(out, clip.skeleton);
  out += "frame_rate ";
  put(out, m.frame_rate);
  out += "\nframes " + std::to_string(m.frame_count) + "\n";
  const std::size_t row = m.joint_count * 3;
  for (std::size_t t = 0; t < m.frame_count; ++t) {
    const double* p = m.positions.data() + t * row;
    for (std::size_t k = 0; k < row; ++k) {
      if (k) out += ' ';
      put(out, p[k]);
    }
    out += '\n';
  }
  if (clip.rotations) {
    const RotationMotion& r = *clip.rotations;
    if (r.frame_count != m.frame_count || r.joint_count != m.joint_count) {
      throw ShapeError("format_clip: rotations do not match positions");
    }
    out += "rotations " + std::to_string(r.frame_count) + "\n";
    for (std::size_t t = 0; t < r.frame_count; ++t) {
      std::vector<double> v{r.root_position[t].x(), r.root_position[t].y(), r.root_position[t].z()};
      for (std::size_t j = 0; j < r.joint_count; ++j) {
        const Quat& q = r.rotation(t, j);
        v.insert(v.end(), {q.w(), q.x(), q.y(), q.z()});
      }
      for (std::size_t k = 0; k < v.size(); ++k) {
        if (k) out += ' ';
        put(out, v[k]);
      }
      out += '\n';
    }
  }
  out += "end\n";
  return out;
}

ClipFile parse_clip(std::string_view text) {
  Reader r(text);
  check_header(r, "mrt-clip", kClipSchemaVersion);
  ClipFile clip;
  clip.skeleton = read_skeleton(r);
  const std::size_t n = clip.skeleton.joint_count();
  const double fps = r.number(r.single("frame_rate"));
  if (!(fps > 0.0)) r.fail("frame_rate must be positive");
  const auto frames = r.integer<std::size_t>(r.single("frames"));
  clip.motion = Motion(0, n, fps);
  clip.motion.frame_count = frames;
  for (std::size_t t = 0; t < frames; ++t) {
    auto toks = r.row("frames", t, frames);
    r.arity(toks, n * 3, "frame row");
    for (auto tok : toks) clip.motion.positions.push_back(r.number(tok));
  }
  if (r.peek("rotations")) {
    const auto count = r.integer<std::size_t>(r.single("rotations"));
    if (count != frames) r.fail("rotations must have one row per frame");
    RotationMotion rot(frames, n, fps);
    for (std::size_t t = 0; t < frames; ++t) {
      auto toks = r.row("rotations", t, frames);
      r.arity(toks, 3 + n * 4, "rotation row");
      rot.root_position[t] = Vec3(r.number(toks[0]), r.number(toks[1]), r.number(toks[2]));
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t o = 3 + j * 4;
        rot.rotation(t, j) = Quat(r.number(toks[o]), r.number(toks[o + 1]), r.number(toks[o + 2]), r.number(toks[o + 3]));
      }
    }
    clip.rotations = std::move(rot);
  }
  auto end = r.keyed("end");
  r.arity(end, 0, "end");
  if (!r.done()) r.fail("trailing content after 'end'");
  return clip;
}

void write_clip(const std::filesystem::path& path, const ClipFile& clip) { write_text(path, format_clip(clip)); }

ClipFile read_clip(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  try {
    return parse_clip(text);
  } catch (const ParseError& e) {
    throw ParseError(path.string(), e.line(), e.detail());
  }
}

std::vector<double> read_lengths(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  Reader r(text);
  if (r.peek("mrt-clip")) return parse_clip(text).skeleton.bone_length;
  auto toks = r.keyed("lengths");
  if (toks.empty()) r.fail("lengths: no values");
  std::vector<double> out;
  for (auto t : toks) {
    const double v = r.number(t);
    if (!(v > 0.0)) r.fail("lengths must be positive");
    out.push_back(v);
  }
  return out;
}

void write_lengths(const std::filesystem::path& path, const std::vector<double>& lengths) {
  std::string out;
  put_row(out, "lengths", lengths.begin(), lengths.end());
  write_text(path, out);
}

void write_dataset(const std::filesystem::path& dir, const Dataset& d) {
  validate_dataset(d);
  require_token("dataset id", d.id);
  std::filesystem::create_directories(dir / "clips");
  std::string m = "mrt-dataset " + std::to_string(kDatasetSchemaVersion) + "\n";
  m += "id " + d.id + "\n";
  m += "mode " + to_string(d.mode) + "\n";
  m += "characters " + std::to_string(d.characters.size()) + "\n";
  for (const CharacterSpec& c : d.characters) {
    require_token("character id", c.id);
    m += "character " + c.id + "\n";
    put_skeleton(m, c.skeleton);
    put_row(m, "flexibility", c.flexibility.begin(), c.flexibility.end());
  }
  m += "clips " + std::to_string(d.clips.size()) + "\n";
  for (const ClipRecord& c : d.clips) {
    require_token("clip id", c.clip_id);
    if (c.split == Split::test) require_token("pairing key", c.pairing_key);
    m += "clip " + c.clip_id + " " + c.character_id + " " + to_string(c.split) + " " +
         (c.split == Split::test ? c.pairing_key : "-") + " " + std::to_string(c.seed) + "\n";
    write_clip(dir / "clips" / (c.clip_id + ".clip"), ClipFile{d.character(c.character_id).skeleton, c.motion, c.rotations});
  }
  m += "end\n";
  write_text(dir / "manifest.txt", m);
}

Dataset read_dataset(const std::filesystem::path& dir) {
  const std::filesystem::path manifest = dir / "manifest.txt";
  const std::string text = read_text(manifest);
  Reader r(text);
  Dataset d;
  std::vector<ClipRecord> clips;
  try {
    check_header(r, "mrt-dataset", kDatasetSchemaVersion);
    d.id = std::string(r.single("id"));
    d.mode = parse_dataset_mode(r.single("mode"));
    const auto n_chars = r.integer<std::size_t>(r.single("characters"));
    for (std::size_t k = 0; k < n_chars; ++k) {
      CharacterSpec c;
      c.id = std::string(r.single("character"));
      c.skeleton = read_skeleton(r);
      auto flex = r.keyed("flexibility");
      r.arity(flex, c.skeleton.joint_count(), "flexibility");
      for (auto f : flex) c.flexibility.push_back(r.number(f));
      d.characters.push_back(std::move(c));
    }
    const auto n_clips = r.integer<std::size_t>(r.single("clips"));
    for (std::size_t i = 0; i < n_clips; ++i) {
      auto toks = r.keyed("clip");
      r.arity(toks, 5, "clip");
      ClipRecord c;
      c.clip_id = std::string(toks[0]);
      if (!token_safe(c.clip_id)) r.fail("invalid clip id '" + c.clip_id + "'");
      c.character_id = std::string(toks[1]);
      if (toks[2] == "train") c.split = Split::train;
      else if (toks[2] == "test") c.split = Split::test;
      else r.fail("unknown split '" + std::string(toks[2]) + "'");
      c.pairing_key = toks[3] == "-" ? std::string() : std::string(toks[3]);
      c.seed = r.integer<std::uint64_t>(toks[4]);
      clips.push_back(std::move(c));
    }
    auto end = r.keyed("end");
    r.arity(end, 0, "end");
  } catch (const ParseError& e) {
    throw ParseError(manifest.string(), e.line(), e.detail());
  }
  // Check the split invariants before touching clip files.
  Dataset shell = d;
  shell.clips = clips;
  for (ClipRecord& c : shell.clips) {
    for (const CharacterSpec& ch : shell.characters) {
      if (ch.id == c.character_id) c.motion.joint_count = ch.skeleton.joint_count();
    }
  }
  validate_dataset(shell);

  for (ClipRecord& c : clips) {
    ClipFile f = read_clip(dir / "clips" / (c.clip_id + ".clip"));
    if (!(f.skeleton == d.character(c.character_id).skeleton)) {
      throw InvariantError("character", "clip '" + c.clip_id + "' skeleton differs from character '" + c.character_id + "'");
    }
    c.motion = std::move(f.motion);
    c.rotations = std::move(f.rotations);
  }
  d.clips = std::move(clips);
  validate_dataset(d);
  return d;
}

}  // namespace mrt
