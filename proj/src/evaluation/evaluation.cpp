#include "mrt/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <functional>
#include <map>
#include <thread>

#include "mrt/error.hpp"
#include "mrt/text.hpp"
#include "mrt/training.hpp"

namespace mrt {

namespace {

void check_parent_order(std::span<const int> parent, const char* what) {
  if (parent.empty() || parent[0] != kNoParent) throw ShapeError(std::string(what) + ": joint 0 must be the root");
  for (std::size_t j = 1; j < parent.size(); ++j) {
    if (parent[j] < 0 || static_cast<std::size_t>(parent[j]) >= j) {
      throw ShapeError(std::string(what) + ": joint " + std::to_string(j) + " must have an earlier parent");
    }
  }
}

// Evaluates f(0..n-1) on `workers` threads; results land by index, so any
// later reduction in index order is independent of scheduling.
std::vector<double> parallel_map(std::size_t n, std::size_t workers, const std::function<double(std::size_t)>& f) {
  if (workers < 1) throw Error("workers must be at least 1");
  std::vector<double> out(n);
  workers = std::min(workers, std::max<std::size_t>(n, 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(i);
    return out;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) {
        try {
          out[i] = f(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (std::thread& t : threads) t.join();
  for (const std::exception_ptr& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

double mean_in_order(const std::vector<double>& v) {
  double sum = 0.0;
  for (double x : v) sum += x;
  return sum / static_cast<double>(v.size());
}

void check_model_topology(const Model& model, const Dataset& data) {
  for (const CharacterSpec& c : data.characters) {
    if (c.skeleton.parent != model.parent) {
      throw Error("topology mismatch: checkpoint " + model.id + " does not fit character " + c.id + " of " + data.id);
    }
  }
}

Motion window(const Motion& m, std::size_t start, std::size_t frames) {
  Motion out(frames, m.joint_count, m.frame_rate);
  for (std::size_t t = 0; t < frames; ++t) {
    const std::size_t src = std::min(start + t, m.frame_count - 1);
    for (std::size_t j = 0; j < m.joint_count; ++j) out.set_position(t, j, m.position(src, j));
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Baselines

Motion position_copy(const Motion& x_a, const Skeleton& target) {
  if (x_a.joint_count != target.joint_count()) {
    throw ShapeError("position_copy: motion has " + std::to_string(x_a.joint_count) + " joints, target skeleton has " +
                     std::to_string(target.joint_count()));
  }
  return x_a;
}

Motion direction_copy(const Motion& x_a, std::span<const int> parent, std::span<const double> lengths_b) {
  check_parent_order(parent, "direction_copy");
  if (x_a.joint_count != parent.size()) throw ShapeError("direction_copy: motion joint count does not match the topology");
  if (lengths_b.size() + 1 != parent.size()) throw ShapeError("direction_copy: expected one target length per bone");
  Motion out = x_a;
  for (std::size_t t = 0; t < x_a.frame_count; ++t) {
    for (std::size_t j = 1; j < parent.size(); ++j) {
      const std::size_t p = static_cast<std::size_t>(parent[j]);
      const Vec3 bone = x_a.position(t, j) - x_a.position(t, p);
      const double len = bone.norm();
      if (!(len > 1e-12)) {
        throw Error("direction_copy: source bone " + std::to_string(bone_of_joint(j)) + " has zero length at frame " +
                    std::to_string(t));
      }
      out.set_position(t, j, out.position(t, p) + lengths_b[bone_of_joint(j)] * (bone / len));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model

Model make_model(const Checkpoint& ckpt, const std::string& id) {
  Model m;
  m.hyper = ckpt.hyper;
  m.parent = ckpt.parent;
  check_parent_order(m.parent, "checkpoint");
  m.topo = Topology::from_parents(m.parent);
  m.params = extract_params(ckpt, "model");
  check_model(m.params, m.hyper, m.topo);
  m.id = id;
  if (const auto it = ckpt.meta.find("step"); it != ckpt.meta.end()) m.id += "@" + it->second;
  if (const auto it = ckpt.meta.find("config_hash"); it != ckpt.meta.end()) m.config_hash = it->second;
  if (const auto it = ckpt.meta.find("config"); it != ckpt.meta.end()) m.config = it->second;
  return m;
}

Model load_model(const std::filesystem::path& path) { return make_model(read_checkpoint(path), path.filename().string()); }

Motion apply_model(const Model& model, const Motion& x_a, std::span<const double> lengths_b) {
  if (x_a.joint_count != model.topo.joints) {
    throw ShapeError("apply_model: motion has " + std::to_string(x_a.joint_count) + " joints, model expects " +
                     std::to_string(model.topo.joints));
  }
  if (x_a.frame_count == 0) throw Error("apply_model: empty clip");
  const std::vector<double> lengths(lengths_b.begin(), lengths_b.end());
  const std::size_t T = model.hyper.frames;
  const std::size_t L = x_a.frame_count;
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + T <= L; s += T) starts.push_back(s);
  if (starts.empty()) starts.push_back(0);
  else if (starts.back() + T < L) starts.push_back(L - T);

  Motion out(L, x_a.joint_count, x_a.frame_rate);
  std::size_t done = 0;  // frames [0, done) are written
  for (std::size_t s : starts) {
    const Motion y = translate(window(x_a, s, T), lengths, model.topo, model.hyper, model.params);
    for (std::size_t t = std::max(done, s); t < std::min(L, s + T); ++t) {
      for (std::size_t j = 0; j < x_a.joint_count; ++j) out.set_position(t, j, y.position(t - s, j));
    }
    done = std::min(L, s + T);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

double motion_error_mm(const Motion& a, const Motion& b) {
  if (a.frame_count != b.frame_count || a.joint_count != b.joint_count) {
    throw ShapeError("motion_error: motions differ in shape (" + std::to_string(a.frame_count) + "x" +
                     std::to_string(a.joint_count) + " vs " + std::to_string(b.frame_count) + "x" +
                     std::to_string(b.joint_count) + ")");
  }
  if (a.frame_count == 0 || a.joint_count < 2) throw Error("motion_error: need at least one frame and two joints");
  const Motion ca = root_center(a);
  const Motion cb = root_center(b);
  double sum = 0.0;
  for (std::size_t t = 0; t < a.frame_count; ++t) {
    for (std::size_t j = 1; j < a.joint_count; ++j) sum += (ca.position(t, j) - cb.position(t, j)).norm();
  }
  return 1000.0 * sum / static_cast<double>(a.frame_count * (a.joint_count - 1));
}

std::string to_string(Method m) {
  switch (m) {
    case Method::position_copy: return "position_copy";
    case Method::direction_copy: return "direction_copy";
    case Method::model: return "model";
  }
  return "?";
}

Method parse_method(std::string_view s) {
  if (s == "position_copy") return Method::position_copy;
  if (s == "direction_copy" || s == "rotation_copy") return Method::direction_copy;
  if (s == "model") return Method::model;
  throw Error("unknown method '" + std::string(s) + "' (expected position_copy, direction_copy or model)");
}

std::string method_label(Method m, const std::string& model_mode) {
  if (m == Method::position_copy) return "Position copy";
  if (m == Method::direction_copy) return "Rotation copy";
  if (model_mode == "cyclegan") return "CycleGAN";
  if (model_mode == "unit") return "UNIT";
  return model_mode;
}

Motion retarget(Method method, const Motion& x_a, const Skeleton& target, const Model* model) {
  switch (method) {
    case Method::position_copy: return position_copy(x_a, target);
    case Method::direction_copy: return direction_copy(x_a, target.parent, target.bone_length);
    case Method::model:
      if (!model) throw Error("retarget: the model method needs a checkpoint");
      if (target.parent != model->parent) throw Error("topology mismatch: target skeleton does not fit " + model->id);
      return apply_model(*model, x_a, target.bone_length);
  }
  throw Error("retarget: unknown method");
}

Retargeter make_retargeter(Method method, const Model* model) {
  if (method == Method::model && !model) throw Error("retarget: the model method needs a checkpoint");
  return [method, model](const Motion& x, const Skeleton& target) { return retarget(method, x, target, model); };
}

double reconstruction_error(const Retargeter& f, const Dataset& data, Split split, std::size_t workers) {
  std::vector<const ClipRecord*> clips;
  for (const ClipRecord& c : data.clips) {
    if (c.split == split) clips.push_back(&c);
  }
  if (clips.empty()) throw Error("reconstruction_error: dataset " + data.id + " has no " + to_string(split) + " clips");
  return mean_in_order(parallel_map(clips.size(), workers, [&](std::size_t i) {
    const ClipRecord& c = *clips[i];
    return motion_error_mm(c.motion, f(c.motion, data.character(c.character_id).skeleton));
  }));
}

double reconstruction_error(const Model& model, const Dataset& data, Split split, std::size_t workers) {
  check_model_topology(model, data);
  return reconstruction_error(make_retargeter(Method::model, &model), data, split, workers);
}

double retargeting_error(const Retargeter& f, const Dataset& data, std::size_t workers) {
  const std::vector<std::string> chars = data.characters_in(Split::test);
  if (chars.size() < 2) throw Error("retargeting_error: dataset " + data.id + " needs at least two test characters");
  std::map<std::pair<std::string, std::string>, const ClipRecord*> by_key;
  std::vector<std::string> keys;
  for (const ClipRecord& c : data.clips) {
    if (c.split != Split::test) continue;
    if (c.pairing_key.empty()) throw Error("retargeting_error: test clip " + c.clip_id + " has no pairing key");
    by_key[{c.character_id, c.pairing_key}] = &c;
    if (std::find(keys.begin(), keys.end(), c.pairing_key) == keys.end()) keys.push_back(c.pairing_key);
  }
  std::sort(keys.begin(), keys.end());
  for (const std::string& ch : chars) {
    for (const std::string& k : keys) {
      if (!by_key.count({ch, k})) throw Error("missing pairing: test character " + ch + " has no clip for key " + k);
    }
  }
  struct Job {
    const ClipRecord* src;
    const ClipRecord* truth;
  };
  std::vector<Job> jobs;
  for (const std::string& a : chars) {
    for (const std::string& b : chars) {
      if (a == b) continue;
      for (const std::string& k : keys) jobs.push_back({by_key.at({a, k}), by_key.at({b, k})});
    }
  }
  return mean_in_order(parallel_map(jobs.size(), workers, [&](std::size_t i) {
    const Job& j = jobs[i];
    return motion_error_mm(f(j.src->motion, data.character(j.truth->character_id).skeleton), j.truth->motion);
  }));
}

double retargeting_error(Method method, const Dataset& data, const Model* model, std::size_t workers) {
  if (method == Method::model) {
    if (!model) throw Error("retargeting_error: the model method needs a checkpoint");
    check_model_topology(*model, data);
  }
  return retargeting_error(make_retargeter(method, model), data, workers);
}

// ---------------------------------------------------------------------------
// Report

void EvalReport::validate() const {
  for (const MethodRow& r : rows) {
    for (double v : {r.recon_train_mm, r.recon_test_mm, r.retarget_test_mm}) {
      if (!std::isfinite(v) || v < 0.0) throw InvariantError("finite-non-negative-error", "report row " + r.method + " has an invalid error value");
    }
  }
}

EvalReport evaluate_all(const Model& model, const Dataset& data, std::size_t workers) {
  check_model_topology(model, data);
  EvalReport r;
  r.dataset_id = data.id;
  r.checkpoint_id = model.id;
  r.config_hash = model.config_hash;
  r.config = model.config;
  std::string mode = "Model";
  if (!model.config.empty()) mode = to_string(parse_config(model.config, model.id).mode);
  for (Method m : {Method::position_copy, Method::direction_copy}) {
    r.rows.push_back({method_label(m), 0.0, 0.0, retargeting_error(m, data, nullptr, workers)});
  }
  r.rows.push_back({method_label(Method::model, mode), reconstruction_error(model, data, Split::train, workers),
                    reconstruction_error(model, data, Split::test, workers),
                    retargeting_error(Method::model, data, &model, workers)});
  r.validate();
  return r;
}

std::string format_table(const EvalReport& report) {
  const std::vector<std::string> header{"Method", "Reconstruction error (train)", "Reconstruction error (test)",
                                        "Retargeting error (test)"};
  double best = INFINITY;
  for (const MethodRow& r : report.rows) best = std::min(best, r.retarget_test_mm);
  const auto mm = [](double v) { return format_fixed(v, 1) + " mm"; };
  std::vector<std::vector<std::string>> cells{header};
  for (const MethodRow& r : report.rows) {
    const std::string retarget = r.retarget_test_mm == best ? "**" + mm(r.retarget_test_mm) + "**" : mm(r.retarget_test_mm);
    cells.push_back({r.method, mm(r.recon_train_mm), mm(r.recon_test_mm), retarget});
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  const auto line = [&](const std::vector<std::string>& row) {
    std::string s = "|";
    for (std::size_t c = 0; c < row.size(); ++c) {
      const std::string pad(width[c] - row[c].size(), ' ');
      s += " " + (c == 0 ? row[c] + pad : pad + row[c]) + " |";
    }
    return s + "\n";
  };
  std::string out = line(cells[0]);
  out += "|";
  for (std::size_t c = 0; c < width.size(); ++c) {
    out += c == 0 ? ":" + std::string(width[c] + 1, '-') + "|" : std::string(width[c] + 1, '-') + ":|";
  }
  out += "\n";
  for (std::size_t i = 1; i < cells.size(); ++i) out += line(cells[i]);
  return out;
}

std::string format_key_values(const EvalReport& report) {
  std::string out;
  const auto put = [&](const std::string& k, const std::string& v) { out += k + " = " + v + "\n"; };
  put("dataset", report.dataset_id);
  put("checkpoint", report.checkpoint_id);
  put("config_hash", report.config_hash);
  for (std::size_t start = 0; start < report.config.size();) {
    const std::size_t nl = std::min(report.config.find('\n', start), report.config.size());
    const std::string_view line = std::string_view(report.config).substr(start, nl - start);
    if (const auto eq = line.find('='); eq != std::string_view::npos) {
      put("config." + std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))));
    }
    start = nl + 1;
  }
  put("rows", std::to_string(report.rows.size()));
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const std::string p = "row." + std::to_string(i) + ".";
    put(p + "method", report.rows[i].method);
    put(p + "recon_train_mm", format_number(report.rows[i].recon_train_mm));
    put(p + "recon_test_mm", format_number(report.rows[i].recon_test_mm));
    put(p + "retarget_test_mm", format_number(report.rows[i].retarget_test_mm));
  }
  return out;
}

EvalReport parse_key_values(std::string_view text) {
  EvalReport r;
  std::size_t line_no = 0;
  const auto fail = [&](const std::string& what) {
    throw ParseError("report", line_no, what);
  };
  const auto number = [&](std::string_view v) {
    const auto n = parse_number(v);
    if (!n) fail("expected a number, found '" + std::string(v) + "'");
    return *n;
  };
  for (std::size_t start = 0; start < text.size();) {
    const std::size_t nl = std::min(text.find('\n', start), text.size());
    const std::string_view line = text.substr(start, nl - start);
    start = nl + 1;
    ++line_no;
    if (trim(line).empty()) continue;
    const auto eq = line.find(" = ");
    if (eq == std::string_view::npos) fail("expected 'key = value'");
    const std::string key(line.substr(0, eq));
    const std::string_view value = line.substr(eq + 3);
    if (key == "dataset") {
      r.dataset_id = value;
    } else if (key == "checkpoint") {
      r.checkpoint_id = value;
    } else if (key == "config_hash") {
      r.config_hash = value;
    } else if (key.rfind("config.", 0) == 0) {
      r.config += key.substr(7) + " = " + std::string(value) + "\n";
    } else if (key == "rows") {
      const auto n = parse_integer<std::size_t>(value);
      if (!n) fail("bad row count");
      r.rows.resize(*n);
    } else if (key.rfind("row.", 0) == 0) {
      const auto dot = key.find('.', 4);
      const auto idx = parse_integer<std::size_t>(std::string_view(key).substr(4, dot == std::string::npos ? 0 : dot - 4));
      if (!idx || *idx >= r.rows.size()) fail("row index out of range in '" + key + "'");
      MethodRow& row = r.rows[*idx];
      const std::string field = key.substr(dot + 1);
      if (field == "method") row.method = value;
      else if (field == "recon_train_mm") row.recon_train_mm = number(value);
      else if (field == "recon_test_mm") row.recon_test_mm = number(value);
      else if (field == "retarget_test_mm") row.retarget_test_mm = number(value);
      else fail("unknown field '" + field + "'");
    } else {
      fail("unknown key '" + key + "'");
    }
  }
  r.validate();
  return r;
}

// ---------------------------------------------------------------------------
// Rendering

std::string to_string(Plane p) {
  switch (p) {
    case Plane::xy: return "xy";
    case Plane::xz: return "xz";
    case Plane::zy: return "zy";
  }
  return "?";
}

Plane parse_plane(std::string_view s) {
  if (s == "xy") return Plane::xy;
  if (s == "xz") return Plane::xz;
  if (s == "zy") return Plane::zy;
  throw Error("unknown plane '" + std::string(s) + "' (expected xy, xz or zy)");
}

namespace {

constexpr double kPanel = 320.0;
constexpr double kMargin = 24.0;
constexpr double kTitle = 20.0;

std::array<double, 2> project(const Vec3& p, Plane plane) {
  switch (plane) {
    case Plane::xy: return {p.x(), p.y()};
    case Plane::xz: return {p.x(), p.z()};
    case Plane::zy: return {p.z(), p.y()};
  }
  return {0.0, 0.0};
}

std::string escape_xml(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) { return format_fixed(v, 2); }

}  // namespace

std::string render_panels_svg(std::span<const Panel> panels, std::size_t frame, Plane plane) {
  if (panels.empty()) throw Error("render: nothing to draw");
  double lo_u = INFINITY, hi_u = -INFINITY, lo_v = INFINITY, hi_v = -INFINITY;
  for (const Panel& p : panels) {
    if (!p.motion) throw Error("render: panel '" + p.title + "' has no motion");
    if (frame >= p.motion->frame_count) {
      throw Error("render: frame " + std::to_string(frame) + " is out of range for a clip of " +
                  std::to_string(p.motion->frame_count) + " frames");
    }
    if (p.parent.size() != p.motion->joint_count) throw ShapeError("render: parent list does not match the joint count");
    for (std::size_t j = 0; j < p.motion->joint_count; ++j) {
      const auto [u, v] = project(p.motion->position(frame, j), plane);
      lo_u = std::min(lo_u, u);
      hi_u = std::max(hi_u, u);
      lo_v = std::min(lo_v, v);
      hi_v = std::max(hi_v, v);
    }
  }
  const double extent = std::max(hi_u - lo_u, hi_v - lo_v);
  const double scale = extent > 0.0 ? (kPanel - 2.0 * kMargin) / extent : 1.0;
  const double mid_u = 0.5 * (lo_u + hi_u), mid_v = 0.5 * (lo_v + hi_v);
  const double width = kPanel * static_cast<double>(panels.size());
  const double height = kPanel + kTitle;

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(width) + "\" height=\"" + num(height) +
                    "\" viewBox=\"0 0 " + num(width) + " " + num(height) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t i = 0; i < panels.size(); ++i) {
    const Panel& p = panels[i];
    const double ox = kPanel * static_cast<double>(i);
    const auto at = [&](std::size_t j) {
      const auto [u, v] = project(p.motion->position(frame, j), plane);
      return std::array<double, 2>{ox + kPanel / 2.0 + scale * (u - mid_u), kTitle + kPanel / 2.0 - scale * (v - mid_v)};
    };
    svg += "<g>\n";
    if (!p.title.empty()) {
      svg += "<text x=\"" + num(ox + kPanel / 2.0) + "\" y=\"16.00\" text-anchor=\"middle\" font-family=\"sans-serif\" "
             "font-size=\"14\">" + escape_xml(p.title) + "</text>\n";
    }
    for (std::size_t j = 0; j < p.parent.size(); ++j) {
      if (p.parent[j] < 0) continue;
      const auto a = at(static_cast<std::size_t>(p.parent[j]));
      const auto b = at(j);
      svg += "<line x1=\"" + num(a[0]) + "\" y1=\"" + num(a[1]) + "\" x2=\"" + num(b[0]) + "\" y2=\"" + num(b[1]) +
             "\" stroke=\"black\" stroke-width=\"2\"/>\n";
    }
    for (std::size_t j = 0; j < p.parent.size(); ++j) {
      const auto c = at(j);
      svg += "<circle cx=\"" + num(c[0]) + "\" cy=\"" + num(c[1]) + "\" r=\"3\" fill=\"#c0392b\"/>\n";
    }
    svg += "</g>\n";
  }
  return svg + "</svg>\n";
}

std::string render_frame_svg(const Motion& m, std::span<const int> parent, std::size_t frame, Plane plane) {
  const Panel panel{"", &m, parent};
  return render_panels_svg(std::span<const Panel>(&panel, 1), frame, plane);
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot create " + tmp.string());
    out << text;
    out.flush();
    if (!out) {
      std::filesystem::remove(tmp);
      throw IoError("write failed for " + path.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace mrt
