#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "mrt/error.hpp"
#include "mrt/motiondata.hpp"

namespace mrt {

namespace {

struct Token {
  std::string_view text;
  std::size_t line;
};

// Whitespace-separated tokens; braces always stand alone.
std::vector<Token> tokenize(std::string_view text) {
  std::vector<Token> out;
  std::size_t line = 1;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c == '\n') {
      ++line;
      ++i;
    } else if (c == ' ' || c == '\t' || c == '\r') {
      ++i;
    } else if (c == '{' || c == '}') {
      out.push_back({text.substr(i, 1), line});
      ++i;
    } else {
      const std::size_t start = i;
      while (i < text.size() && text[i] != ' ' && text[i] != '\t' && text[i] != '\r' && text[i] != '\n' &&
             text[i] != '{' && text[i] != '}') {
        ++i;
      }
      out.push_back({text.substr(start, i - start), line});
    }
  }
  return out;
}

enum class Channel { xpos, ypos, zpos, xrot, yrot, zrot };

struct BvhJoint {
  std::string name;
  int parent = kNoParent;
  Vec3 offset = Vec3::Zero();
  std::vector<Channel> channels;
  std::size_t first_value = 0;  // column of the first channel in a MOTION row
  bool end_site = false;
};

class Parser {
 public:
  explicit Parser(std::string_view text) : tokens_(tokenize(text)) {}

  BvhClip parse() {
    expect("HIERARCHY");
    const Token& root = next("ROOT");
    if (root.text != "ROOT") fail(root.line, "expected ROOT, found '" + std::string(root.text) + "'");
    parse_joint(kNoParent, false);
    expect("MOTION");
    return parse_motion();
  }

 private:
  [[noreturn]] void fail(std::size_t line, const std::string& msg) const { throw ParseError(line, msg); }

  std::size_t last_line() const { return tokens_.empty() ? 1 : tokens_.back().line; }

  const Token& next(const char* wanted) {
    if (pos_ >= tokens_.size()) fail(last_line(), std::string("unexpected end of input, expected ") + wanted);
    return tokens_[pos_++];
  }

  void expect(std::string_view keyword) {
    const Token& t = next(std::string(keyword).c_str());
    if (t.text != keyword) fail(t.line, "expected '" + std::string(keyword) + "', found '" + std::string(t.text) + "'");
  }

  double number(const Token& t) const {
    double v = 0.0;
    const char* first = t.text.data();
    const char* last = first + t.text.size();
    if (*first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last) fail(t.line, "expected a number, found '" + std::string(t.text) + "'");
    if (!std::isfinite(v)) fail(t.line, "non-finite number '" + std::string(t.text) + "'");
    return v;
  }

  std::size_t count(const Token& t) const {
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(t.text.data(), t.text.data() + t.text.size(), v);
    if (ec != std::errc() || ptr != t.text.data() + t.text.size()) {
      fail(t.line, "expected a non-negative integer, found '" + std::string(t.text) + "'");
    }
    return v;
  }

  Vec3 offset() {
    expect("OFFSET");
    Vec3 v;
    for (int k = 0; k < 3; ++k) v[k] = number(next("an OFFSET component"));
    return v;
  }

  void parse_joint(int parent, bool end_site) {
    BvhJoint j;
    j.parent = parent;
    j.end_site = end_site;
    const Token& name = next("a joint name");
    if (end_site) {
      if (name.text != "Site") fail(name.line, "expected 'Site' after 'End'");
      j.name = joints_[static_cast<std::size_t>(parent)].name + "_end";
    } else {
      if (name.text == "{" || name.text == "}") fail(name.line, "missing joint name");
      j.name = std::string(name.text);
    }
    expect("{");
    const std::size_t offset_line = pos_ < tokens_.size() ? tokens_[pos_].line : last_line();
    j.offset = offset();
    const double len = j.offset.norm();
    if (parent != kNoParent && !end_site && len == 0.0) {
      fail(offset_line, "zero-length OFFSET on joint '" + j.name + "'");
    }
    if (parent != kNoParent && len != 0.0 && !(std::abs((j.offset / len).norm() - 1.0) <= 1e-9)) {
      fail(offset_line, "OFFSET of joint '" + j.name + "' is too small to normalize");
    }
    if (!end_site) parse_channels(j);

    const auto index = static_cast<int>(joints_.size());
    joints_.push_back(std::move(j));
    if (end_site) {
      expect("}");
      return;
    }
    for (;;) {
      const Token& t = next("JOINT, End Site or '}'");
      if (t.text == "}") return;
      if (t.text == "JOINT") {
        parse_joint(index, false);
      } else if (t.text == "End") {
        parse_joint(index, true);
      } else {
        fail(t.line, "unknown keyword '" + std::string(t.text) + "'");
      }
    }
  }

  void parse_channels(BvhJoint& j) {
    expect("CHANNELS");
    const Token& n_tok = next("a channel count");
    const std::size_t n = count(n_tok);
    if (n != 3 && n != 6) fail(n_tok.line, "CHANNELS must list 3 or 6 channels, found " + std::to_string(n));
    unsigned seen = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const Token& t = next("a channel name");
      Channel c;
      if (t.text == "Xposition") c = Channel::xpos;
      else if (t.text == "Yposition") c = Channel::ypos;
      else if (t.text == "Zposition") c = Channel::zpos;
      else if (t.text == "Xrotation") c = Channel::xrot;
      else if (t.text == "Yrotation") c = Channel::yrot;
      else if (t.text == "Zrotation") c = Channel::zrot;
      else fail(t.line, "unknown channel '" + std::string(t.text) + "'");
      const unsigned bit = 1u << static_cast<unsigned>(c);
      if (seen & bit) fail(t.line, "duplicate channel '" + std::string(t.text) + "'");
      seen |= bit;
      j.channels.push_back(c);
    }
    j.first_value = channel_total_;
    channel_total_ += n;
  }

  BvhClip parse_motion() {
    expect("Frames:");
    const Token& frames_tok = next("a frame count");
    const std::size_t frames = count(frames_tok);
    expect("Frame");
    expect("Time:");
    const Token& dt_tok = next("a frame time");
    const double dt = number(dt_tok);
    if (!(dt > 0.0) || !std::isfinite(1.0 / dt)) fail(dt_tok.line, "Frame Time must be positive");

    // Remaining tokens are grouped into rows by source line.
    std::vector<std::vector<double>> rows;
    std::size_t row_line = 0;
    while (pos_ < tokens_.size()) {
      const Token& t = tokens_[pos_++];
      if (rows.empty() || t.line != row_line) {
        if (!rows.empty() && rows.back().size() != channel_total_) mismatch(row_line, rows.back().size());
        rows.emplace_back();
        row_line = t.line;
        row_lines_.push_back(row_line);
        if (rows.size() > frames) fail(t.line, "more MOTION rows than the declared Frames: " + std::to_string(frames));
      }
      rows.back().push_back(number(t));
    }
    if (!rows.empty() && rows.back().size() != channel_total_) mismatch(row_line, rows.back().size());
    if (rows.size() != frames) {
      fail(last_line(), "found " + std::to_string(rows.size()) + " MOTION rows, Frames declares " + std::to_string(frames));
    }
    if (frames == 0) fail(frames_tok.line, "Frames must be at least 1");
    return build(rows, 1.0 / dt);
  }

  [[noreturn]] void mismatch(std::size_t line, std::size_t got) const {
    fail(line, "channel/value count mismatch: row has " + std::to_string(got) + " values, hierarchy declares " +
                   std::to_string(channel_total_));
  }

  BvhClip build(const std::vector<std::vector<double>>& rows, double fps) const {
    // End sites with a zero offset carry no bone and are dropped.
    std::vector<int> keep_index(joints_.size(), -1);
    BvhClip out;
    Skeleton& s = out.skeleton;
    for (std::size_t i = 0; i < joints_.size(); ++i) {
      const BvhJoint& j = joints_[i];
      if (j.end_site && j.offset.norm() == 0.0) continue;
      keep_index[i] = static_cast<int>(s.parent.size());
      s.parent.push_back(j.parent == kNoParent ? kNoParent : keep_index[static_cast<std::size_t>(j.parent)]);
      s.joint_name.push_back(j.name);
      if (j.parent != kNoParent) {
        const double len = j.offset.norm();
        s.bone_length.push_back(len);
        s.rest_direction.push_back(j.offset / len);
      }
    }
    if (s.joint_count() < 2) fail(last_line(), "hierarchy needs at least one bone");
    require_valid(s);

    const std::size_t n = s.joint_count();
    RotationMotion& r = out.motion;
    r = RotationMotion(rows.size(), n, fps);
    std::vector<Quat> local(joints_.size());
    for (std::size_t t = 0; t < rows.size(); ++t) {
      Vec3 root_pos = joints_[0].offset;
      for (std::size_t i = 0; i < joints_.size(); ++i) {
        const BvhJoint& j = joints_[i];
        Quat q = Quat::Identity();
        for (std::size_t k = 0; k < j.channels.size(); ++k) {
          const double v = rows[t][j.first_value + k];
          const Channel c = j.channels[k];
          if (c == Channel::xrot || c == Channel::yrot || c == Channel::zrot) {
            const Vec3 axis = c == Channel::xrot ? Vec3::UnitX() : c == Channel::yrot ? Vec3::UnitY() : Vec3::UnitZ();
            q = q * Quat(Eigen::AngleAxisd(v * M_PI / 180.0, axis));
          } else if (i == 0) {
            root_pos[static_cast<int>(c)] += v;
          }
        }
        local[i] = q.normalized();
      }
      if (!root_pos.allFinite()) fail(row_lines_[t], "root position overflows");
      r.root_position[t] = root_pos;
      // A joint's BVH rotation orients its child bones; here each joint carries
      // the rotation of the bone leading into it, so it takes its parent's.
      for (std::size_t i = 0; i < joints_.size(); ++i) {
        if (keep_index[i] < 0) continue;
        const auto ki = static_cast<std::size_t>(keep_index[i]);
        r.rotation(t, ki) = joints_[i].parent == kNoParent ? Quat::Identity()
                                                           : local[static_cast<std::size_t>(joints_[i].parent)];
      }
    }
    return out;
  }

  std::vector<Token> tokens_;
  std::size_t pos_ = 0;
  std::vector<BvhJoint> joints_;
  std::size_t channel_total_ = 0;
  std::vector<std::size_t> row_lines_;
};

}  // namespace

BvhClip parse_bvh(std::string_view text) { return Parser(text).parse(); }

BvhClip read_bvh(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_bvh(ss.str());
  } catch (const ParseError& e) {
    throw ParseError(path.string(), e.line(), e.detail());
  }
}

}  // namespace mrt
