#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string_view>
#include <unistd.h>

#include "mrt/error.hpp"
#include "mrt/evaluation.hpp"
#include "mrt/gradcheck_suite.hpp"
#include "mrt/kernels.hpp"
#include "mrt/motiondata.hpp"
#include "mrt/text.hpp"
#include "mrt/training.hpp"

namespace fs = std::filesystem;

namespace mrt::cli {

namespace {

// Bad flag combinations or values that CLI11 cannot check on its own.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

const std::vector<std::string> kDatasetModes{"exact", "flexibility"};
const std::vector<std::string> kMethods{"position_copy", "direction_copy", "rotation_copy", "model"};
const std::vector<std::string> kPlanes{"xy", "xz", "zy"};
const std::vector<std::string> kIsas{"scalar", "avx2", "neon"};

// Config keys in file order, taken from the formatter so the flags cannot
// drift from the file format.
std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  const std::string text = format_config(TrainConfig{});
  std::string_view rest = text;
  while (!rest.empty()) {
    const auto nl = rest.find('\n');
    const std::string_view line = rest.substr(0, nl);
    rest = nl == std::string_view::npos ? std::string_view{} : rest.substr(nl + 1);
    const auto eq = line.find('=');
    if (eq != std::string_view::npos) keys.emplace_back(trim(line.substr(0, eq)));
  }
  return keys;
}

std::string dashed(std::string s) {
  std::replace(s.begin(), s.end(), '_', '-');
  return s;
}

// Builds dir in a sibling staging directory and moves it into place, so a
// failure never leaves a half-written dataset. An existing target is replaced
// only when it is itself a dataset.
template <typename Fill>
void write_directory_atomically(const fs::path& dir, Fill fill) {
  if (fs::exists(dir) && !(fs::is_directory(dir) && (fs::is_empty(dir) || fs::exists(dir / "manifest.txt")))) {
    throw Error("refusing to overwrite '" + dir.string() + "': not an empty directory or a dataset");
  }
  const fs::path abs = fs::absolute(dir).lexically_normal();
  const fs::path parent = abs.has_filename() ? abs.parent_path() : abs.parent_path().parent_path();
  const std::string name = abs.has_filename() ? abs.filename().string() : abs.parent_path().filename().string();
  fs::create_directories(parent);
  const fs::path staging = parent / ("." + name + ".tmp" + std::to_string(::getpid()));
  fs::remove_all(staging);
  try {
    fill(staging);
    if (fs::exists(dir)) fs::remove_all(dir);
    fs::rename(staging, dir);
  } catch (...) {
    std::error_code ignored;
    fs::remove_all(staging, ignored);
    throw;
  }
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::optional<std::size_t> chars;
  std::size_t train_chars = 6;
  std::optional<std::size_t> test_chars;
  std::size_t clips = 20;
  std::size_t test_motions = 12;
  std::string mode = "exact";
  std::size_t frames = 40;
  std::size_t joints = 8;
  double scale_min = 0.7;
  double scale_max = 1.3;
  std::uint64_t seed = 0;
  fs::path out;
};

void add_gen_data(CLI::App& app, GenDataArgs& a) {
  app.add_option("--chars", a.chars, "Total characters (default: train + test)")->check(CLI::PositiveNumber);
  app.add_option("--train-chars", a.train_chars, "Characters with unpaired train clips")->capture_default_str();
  app.add_option("--test-chars", a.test_chars, "Held-out characters with paired test clips (default: chars - train)");
  app.add_option("--clips", a.clips, "Train clips per train character")->capture_default_str();
  app.add_option("--test-motions", a.test_motions, "Paired test motions")->capture_default_str();
  app.add_option("--mode", a.mode, "exact or flexibility")->check(CLI::IsMember(kDatasetModes))->capture_default_str();
  app.add_option("--frames", a.frames, "Frames per clip")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--joints", a.joints, "Joints of the canonical skeleton")->check(CLI::Range(2, 1000))->capture_default_str();
  app.add_option("--scale-min", a.scale_min, "Smallest bone scale")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--scale-max", a.scale_max, "Largest bone scale")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--seed", a.seed, "Random seed")->capture_default_str();
  app.add_option("--out", a.out, "Dataset directory")->required();
}

int run_gen_data(const GenDataArgs& a, std::ostream& out) {
  const std::size_t test_chars = a.test_chars ? *a.test_chars : (a.chars ? *a.chars - std::min(*a.chars, a.train_chars) : 2);
  const std::size_t chars = a.chars ? *a.chars : a.train_chars + test_chars;
  if (a.train_chars + test_chars != chars) {
    throw UsageError("--chars " + std::to_string(chars) + " does not equal --train-chars " +
                     std::to_string(a.train_chars) + " plus --test-chars " + std::to_string(test_chars));
  }
  if (a.scale_min > a.scale_max) throw UsageError("--scale-min exceeds --scale-max");

  SynthesisOptions o;
  o.train_chars = a.train_chars;
  o.test_chars = test_chars;
  o.clips_per_train_char = a.clips;
  o.test_motions = a.test_motions;
  o.mode = parse_dataset_mode(a.mode);
  o.frames = a.frames;
  o.seed = a.seed;
  const auto family = generate_character_family(canonical_skeleton(a.joints), chars, a.scale_min, a.scale_max, a.seed);
  const Dataset d = synthesize_dataset(family, o);

  std::string echo;
  const auto put = [&echo](const std::string& k, const std::string& v) { echo += k + " = " + v + "\n"; };
  put("chars", std::to_string(chars));
  put("train_chars", std::to_string(a.train_chars));
  put("test_chars", std::to_string(test_chars));
  put("clips", std::to_string(a.clips));
  put("test_motions", std::to_string(a.test_motions));
  put("mode", a.mode);
  put("frames", std::to_string(a.frames));
  put("joints", std::to_string(a.joints));
  put("scale_min", format_number(a.scale_min));
  put("scale_max", format_number(a.scale_max));
  put("seed", std::to_string(a.seed));

  write_directory_atomically(a.out, [&](const fs::path& dir) {
    write_dataset(dir, d);
    fs::create_directories(dir / "lengths");
    for (const CharacterSpec& c : d.characters) write_lengths(dir / "lengths" / (c.id + ".txt"), c.skeleton.bone_length);
    write_text_file(dir / "generation.txt", echo);
  });
  out << "dataset " << d.id << ": " << d.characters.size() << " characters, " << d.clips.size() << " clips -> "
      << a.out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::optional<fs::path> config;
  std::map<std::string, std::string> overrides;
  fs::path out;
  std::optional<fs::path> resume;
};

void add_train(CLI::App& app, TrainArgs& a) {
  app.add_option("--config", a.config, "Config file; flags below override its values")->check(CLI::ExistingFile);
  for (const std::string& key : config_keys()) {
    std::string name = "--" + key;
    if (dashed(key) != key) name += ",--" + dashed(key);
    app.add_option_function<std::string>(
        name, [&a, key](const std::string& v) { a.overrides[key] = v; }, "Config key '" + key + "'");
  }
  app.add_option("--out", a.out, "Run directory")->required();
  app.add_option("--resume", a.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
}

int run_train(const TrainArgs& a, std::ostream& out) {
  TrainConfig cfg = a.config ? read_config(*a.config) : TrainConfig{};
  for (const auto& [key, value] : a.overrides) {
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw UsageError("--" + key + ": " + e.what());
    }
  }
  if (cfg.dataset.empty()) throw UsageError("no dataset: pass --dataset or set it in the config file");
  const TrainResult r = train_loop(cfg, TrainOptions{a.out, a.resume});
  out << "trained " << r.losses.size() << " steps; trace " << r.trace.string() << "; checkpoint "
      << r.final_checkpoint.string() << "\n";
  if (!r.losses.empty()) out << trace_header(cfg.mode) << "\n" << trace_row(cfg.steps, r.losses.back()) << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  fs::path ckpt, data, out;
  std::size_t workers = 1;
};

void add_eval(CLI::App& app, EvalArgs& a) {
  app.add_option("--ckpt", a.ckpt, "Training checkpoint")->required()->check(CLI::ExistingFile);
  app.add_option("--data", a.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  app.add_option("--out", a.out, "Report directory")->required();
  app.add_option("--workers", a.workers, "Evaluation threads")->check(CLI::Range(1, 256))->capture_default_str();
}

int run_eval(const EvalArgs& a, std::ostream& out) {
  const Model model = load_model(a.ckpt);
  const Dataset data = read_dataset(a.data);
  const EvalReport report = evaluate_all(model, data, a.workers);
  const std::string table = format_table(report);
  fs::create_directories(a.out);
  write_text_file(a.out / "report.md", table);
  write_text_file(a.out / "report.txt", format_key_values(report));
  out << table;
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct RetargetArgs {
  std::optional<fs::path> ckpt;
  fs::path in, lengths, out;
  std::string method = "direction_copy";
};

void add_retarget(CLI::App& app, RetargetArgs& a) {
  app.add_option("--ckpt", a.ckpt, "Training checkpoint (required for --method model)")->check(CLI::ExistingFile);
  app.add_option("--in", a.in, "Source clip")->required()->check(CLI::ExistingFile);
  app.add_option("--lengths", a.lengths, "Target bone lengths")->required()->check(CLI::ExistingFile);
  app.add_option("--method", a.method, "position_copy, direction_copy or model")
      ->check(CLI::IsMember(kMethods))
      ->capture_default_str();
  app.add_option("--out", a.out, "Output clip")->required();
}

int run_retarget(const RetargetArgs& a, std::ostream& out) {
  const Method method = parse_method(a.method);
  if (method == Method::model && !a.ckpt) throw UsageError("--method model needs --ckpt");
  const ClipFile src = read_clip(a.in);
  const std::vector<double> lengths = read_lengths(a.lengths);
  if (lengths.size() != src.skeleton.bone_count()) {
    throw ShapeError("target has " + std::to_string(lengths.size()) + " bone lengths, source skeleton has " +
                     std::to_string(src.skeleton.bone_count()) + " bones");
  }
  Skeleton target = src.skeleton;
  target.bone_length = lengths;
  require_valid(target);
  std::optional<Model> model;
  if (method == Method::model) model = load_model(*a.ckpt);
  const Motion result = retarget(method, src.motion, target, model ? &*model : nullptr);
  write_text_file(a.out, format_clip(ClipFile{target, result, std::nullopt}));
  out << to_string(method) << ": " << result.frame_count << " frames -> " << a.out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct BaselineArgs {
  fs::path data;
  std::string method = "all";
  std::size_t workers = 1;
  std::optional<fs::path> out;
};

void add_baseline(CLI::App& app, BaselineArgs& a) {
  app.add_option("--data", a.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  app.add_option("--method", a.method, "position_copy, direction_copy or all")
      ->check(CLI::IsMember({"all", "position_copy", "direction_copy", "rotation_copy"}))
      ->capture_default_str();
  app.add_option("--workers", a.workers, "Evaluation threads")->check(CLI::Range(1, 256))->capture_default_str();
  app.add_option("--out", a.out, "Also write the results to this file");
}

int run_baseline(const BaselineArgs& a, std::ostream& out) {
  std::vector<Method> methods;
  if (a.method == "all") {
    methods = {Method::position_copy, Method::direction_copy};
  } else {
    methods = {parse_method(a.method)};
  }
  const Dataset data = read_dataset(a.data);
  std::string text = "dataset = " + data.id + "\n";
  for (Method m : methods) {
    text += to_string(m) + ".retargeting_mm = " + format_number(retargeting_error(m, data, nullptr, a.workers)) + "\n";
  }
  if (a.out) write_text_file(*a.out, text);
  out << text;
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::uint64_t seed = 1;
  int trials = 3;
};

void add_gradcheck(CLI::App& app, GradcheckArgs& a) {
  app.add_option("--seed", a.seed, "Random seed")->capture_default_str();
  app.add_option("--trials", a.trials, "Random instances per check")->check(CLI::Range(1, 1000))->capture_default_str();
}

int run_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  bool ok = true;
  for (const GradcheckEntry& e : gradcheck_suite(a.seed, a.trials)) {
    out << e.name << "\t" << format_number(e.max_rel_error) << "\t" << (e.passed() ? "ok" : "FAIL") << "\n";
    ok = ok && e.passed();
  }
  out << (ok ? "all" : "not all") << " checks within " << format_number(kGradcheckTolerance) << "\n";
  return ok ? kExitOk : kExitDomain;
}

// ---------------------------------------------------------------------------

struct RenderArgs {
  fs::path in, out;
  std::optional<fs::path> pred, truth;
  std::size_t frame = 0;
  std::string plane = "xy";
};

void add_render(CLI::App& app, RenderArgs& a) {
  app.add_option("--in", a.in, "Clip to draw")->required()->check(CLI::ExistingFile);
  app.add_option("--pred", a.pred, "Prediction clip drawn beside it")->check(CLI::ExistingFile);
  app.add_option("--truth", a.truth, "Ground-truth clip drawn beside it")->check(CLI::ExistingFile);
  app.add_option("--frame", a.frame, "Frame index")->capture_default_str();
  app.add_option("--plane", a.plane, "Projection plane: xy, xz or zy")->check(CLI::IsMember(kPlanes))->capture_default_str();
  app.add_option("--out", a.out, "SVG file")->required();
}

int run_render(const RenderArgs& a, std::ostream& out) {
  const Plane plane = parse_plane(a.plane);
  const ClipFile src = read_clip(a.in);
  std::string svg;
  if (!a.pred && !a.truth) {
    svg = render_frame_svg(src.motion, src.skeleton.parent, a.frame, plane);
  } else {
    std::optional<ClipFile> pred, truth;
    if (a.pred) pred = read_clip(*a.pred);
    if (a.truth) truth = read_clip(*a.truth);
    std::vector<Panel> panels{{"Source", &src.motion, src.skeleton.parent}};
    if (pred) panels.push_back({"Prediction", &pred->motion, pred->skeleton.parent});
    if (truth) panels.push_back({"Ground truth", &truth->motion, truth->skeleton.parent});
    svg = render_panels_svg(panels, a.frame, plane);
  }
  write_text_file(a.out, svg);
  out << "frame " << a.frame << " -> " << a.out.string() << "\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Skeleton motion retargeting: data synthesis, training, evaluation and baselines.", "mretarget"};
  app.require_subcommand(1, 1);
  std::optional<std::string> isa;
  app.add_option("--isa", isa, "Kernel instruction set: scalar, avx2 or neon")->check(CLI::IsMember(kIsas));

  GenDataArgs gen;
  TrainArgs train;
  EvalArgs eval;
  RetargetArgs ret;
  BaselineArgs base;
  GradcheckArgs grad;
  RenderArgs render;
  CLI::App* gen_cmd = app.add_subcommand("gen-data", "Synthesize a character family and its dataset");
  CLI::App* train_cmd = app.add_subcommand("train", "Train a model");
  CLI::App* eval_cmd = app.add_subcommand("eval", "Compare a model with both baselines");
  CLI::App* ret_cmd = app.add_subcommand("retarget", "Retarget one clip to new bone lengths");
  CLI::App* base_cmd = app.add_subcommand("baseline", "Retargeting error of the baselines on a dataset");
  CLI::App* grad_cmd = app.add_subcommand("gradcheck", "Check every gradient against central differences");
  CLI::App* render_cmd = app.add_subcommand("render", "Draw one frame as SVG");
  add_gen_data(*gen_cmd, gen);
  add_train(*train_cmd, train);
  add_eval(*eval_cmd, eval);
  add_retarget(*ret_cmd, ret);
  add_baseline(*base_cmd, base);
  add_gradcheck(*grad_cmd, grad);
  add_render(*render_cmd, render);

  try {
    app.parse(std::vector<std::string>(args.rbegin(), args.rend()));
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    if (!app.get_subcommands().empty()) err << "run with --help for usage\n";
    return kExitUsage;
  }

  try {
    if (isa) kernels::set_isa(kernels::parse_isa(*isa));
  } catch (const std::exception& e) {
    err << "error: --isa: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (gen_cmd->parsed()) return run_gen_data(gen, out);
    if (train_cmd->parsed()) return run_train(train, out);
    if (eval_cmd->parsed()) return run_eval(eval, out);
    if (ret_cmd->parsed()) return run_retarget(ret, out);
    if (base_cmd->parsed()) return run_baseline(base, out);
    if (grad_cmd->parsed()) return run_gradcheck(grad, out);
    return run_render(render, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomain;
  }
}

}  // namespace mrt::cli
