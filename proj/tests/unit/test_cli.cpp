#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "doctest.h"
#include "mrt/motiondata.hpp"
#include "mrt/training.hpp"

namespace fs = std::filesystem;
using mrt::cli::kExitDomain;
using mrt::cli::kExitOk;
using mrt::cli::kExitUsage;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = mrt::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("mrt_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

bool same_tree(const fs::path& a, const fs::path& b) {
  std::vector<fs::path> fa, fb;
  for (const auto& e : fs::recursive_directory_iterator(a)) fa.push_back(fs::relative(e.path(), a));
  for (const auto& e : fs::recursive_directory_iterator(b)) fb.push_back(fs::relative(e.path(), b));
  std::sort(fa.begin(), fa.end());
  std::sort(fb.begin(), fb.end());
  if (fa != fb) return false;
  for (const fs::path& p : fa) {
    if (fs::is_regular_file(a / p) && slurp(a / p) != slurp(b / p)) return false;
  }
  return true;
}

std::vector<std::string> small_data_args(const fs::path& out) {
  return {"gen-data", "--train-chars", "2", "--test-chars", "2", "--clips", "4", "--test-motions", "2",
          "--joints", "5", "--frames", "20", "--seed", "3", "--out", out.string()};
}

}  // namespace

TEST_CASE("gen-data writes the documented dataset") {
  const fs::path d = fresh_dir("gen");
  const Result r = run({"gen-data", "--chars", "8", "--train-chars", "6", "--clips", "20", "--test-motions", "12", "--mode",
                        "exact", "--seed", "7", "--out", (d / "data").string()});
  REQUIRE(r.code == kExitOk);
  CHECK(r.err.empty());
  const mrt::Dataset data = mrt::read_dataset(d / "data");
  CHECK(data.characters.size() == 8);
  std::size_t train = 0, test = 0;
  for (const auto& c : data.clips) (c.split == mrt::Split::train ? train : test)++;
  CHECK(train == 120);
  CHECK(test == 24);
  CHECK(fs::exists(d / "data" / "generation.txt"));
  CHECK(mrt::read_lengths(d / "data" / "lengths" / "char_07.txt") == data.characters[7].skeleton.bone_length);
}

TEST_CASE("seeded commands are bitwise reproducible") {
  const fs::path d = fresh_dir("repro");
  REQUIRE(run(small_data_args(d / "a")).code == kExitOk);
  REQUIRE(run(small_data_args(d / "b")).code == kExitOk);
  CHECK(same_tree(d / "a", d / "b"));
  // Regenerating into an existing dataset replaces it.
  REQUIRE(run(small_data_args(d / "a")).code == kExitOk);
  CHECK(same_tree(d / "a", d / "b"));

  const auto train = [&](const std::string& out) {
    return run({"train", "--dataset", (d / "a").string(), "--steps", "2", "--batch-size", "2", "--frames", "16",
                "--channels", "4,4,4", "--latent_dim", "4", "--out", (d / out).string()});
  };
  REQUIRE(train("r1").code == kExitOk);
  REQUIRE(train("r2").code == kExitOk);
  CHECK(slurp(d / "r1" / "loss.tsv") == slurp(d / "r2" / "loss.tsv"));
  CHECK(slurp(d / "r1" / "final.bin") == slurp(d / "r2" / "final.bin"));
}

TEST_CASE("train flags override the config file and are echoed") {
  const fs::path d = fresh_dir("override");
  REQUIRE(run(small_data_args(d / "data")).code == kExitOk);
  {
    std::ofstream cfg(d / "cfg.txt");
    cfg << "mode = unit\nsteps = 5\nbatch_size = 2\nframes = 16\nchannels = 4,4,4\nlatent_dim = 4\ndataset = "
        << (d / "data").string() << "\n";
  }
  const Result r = run({"train", "--config", (d / "cfg.txt").string(), "--steps", "1", "--mode", "cyclegan", "--out",
                        (d / "run").string()});
  REQUIRE(r.code == kExitOk);
  const mrt::TrainConfig echoed = mrt::read_config(d / "run" / "config.txt");
  CHECK(echoed.steps == 1);
  CHECK(echoed.mode == mrt::Mode::cyclegan);
  CHECK(echoed.batch_size == 2);
}

TEST_CASE("usage errors exit 2 and write nothing") {
  const fs::path d = fresh_dir("usage");
  const std::vector<std::vector<std::string>> cases{
      {},
      {"no-such-command"},
      {"gen-data"},
      {"gen-data", "--mode", "sideways", "--out", (d / "x").string()},
      {"gen-data", "--chars", "5", "--train-chars", "6", "--out", (d / "x").string()},
      {"gen-data", "--scale-min", "2", "--scale-max", "1", "--out", (d / "x").string()},
      {"gen-data", "--frames", "ten", "--out", (d / "x").string()},
      {"train", "--steps", "abc", "--dataset", d.string(), "--out", (d / "x").string()},
      {"train", "--out", (d / "x").string()},
      {"retarget", "--in", "missing.clip", "--lengths", "missing.txt", "--out", (d / "x").string()},
      {"gradcheck", "--trials", "0"},
      {"render", "--in", "missing.clip", "--plane", "qq", "--out", (d / "x").string()},
      {"--isa", "mips", "gradcheck"},
  };
  for (const auto& args : cases) {
    std::string joined;
    for (const auto& a : args) joined += a + " ";
    INFO(joined);
    const Result r = run(args);
    CHECK(r.code == kExitUsage);
    CHECK(r.out.empty());
    CHECK_FALSE(r.err.empty());
    CHECK(fs::is_empty(d));
  }
}

TEST_CASE("domain errors exit 1 with a message") {
  const fs::path d = fresh_dir("domain");
  {
    std::ofstream bad(d / "bad.clip");
    bad << "not a clip\n";
    std::ofstream cfg(d / "cfg.txt");
    cfg << "warmup = 3\n";
  }
  Result r = run({"render", "--in", (d / "bad.clip").string(), "--out", (d / "o.svg").string()});
  CHECK(r.code == kExitDomain);
  CHECK(r.err.find("error:") == 0);
  CHECK_FALSE(fs::exists(d / "o.svg"));
  r = run({"train", "--config", (d / "cfg.txt").string(), "--out", (d / "run").string()});
  CHECK(r.code == kExitDomain);
  CHECK(r.err.find("unknown config key 'warmup'") != std::string::npos);
  r = run({"baseline", "--data", d.string()});
  CHECK(r.code == kExitDomain);
}

TEST_CASE("retarget with identical lengths reproduces the clip") {
  const fs::path d = fresh_dir("retarget");
  REQUIRE(run(small_data_args(d / "data")).code == kExitOk);
  const fs::path clip = d / "data" / "clips" / "test_m0000_char_02.clip";
  const fs::path lengths = d / "data" / "lengths" / "char_02.txt";
  for (const std::string method : {"direction_copy", "position_copy"}) {
    const fs::path out = d / (method + ".clip");
    REQUIRE(run({"retarget", "--in", clip.string(), "--lengths", lengths.string(), "--method", method, "--out",
                 out.string()})
                .code == kExitOk);
    const mrt::ClipFile a = mrt::read_clip(clip), b = mrt::read_clip(out);
    REQUIRE(a.motion.positions.size() == b.motion.positions.size());
    for (std::size_t i = 0; i < a.motion.positions.size(); ++i) {
      CHECK(std::abs(a.motion.positions[i] - b.motion.positions[i]) <= 1e-12);
    }
    CHECK(b.skeleton.bone_length == a.skeleton.bone_length);
  }
  const Result r = run({"retarget", "--in", clip.string(), "--lengths", lengths.string(), "--method", "model", "--out",
                        (d / "m.clip").string()});
  CHECK(r.code == kExitUsage);
  CHECK_FALSE(fs::exists(d / "m.clip"));
}

TEST_CASE("baseline, eval, render and gradcheck") {
  const fs::path d = fresh_dir("pipeline");
  REQUIRE(run(small_data_args(d / "data")).code == kExitOk);
  Result r = run({"baseline", "--data", (d / "data").string(), "--out", (d / "base.txt").string()});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.find("direction_copy.retargeting_mm = ") != std::string::npos);
  CHECK(slurp(d / "base.txt") == r.out);

  REQUIRE(run({"train", "--dataset", (d / "data").string(), "--steps", "1", "--batch-size", "2", "--frames", "16",
               "--channels", "4,4,4", "--latent-dim", "4", "--out", (d / "run").string()})
              .code == kExitOk);
  r = run({"eval", "--ckpt", (d / "run" / "final.bin").string(), "--data", (d / "data").string(), "--out",
           (d / "eval").string(), "--workers", "2"});
  REQUIRE(r.code == kExitOk);
  CHECK(slurp(d / "eval" / "report.md") == r.out);
  CHECK(r.out.find("| UNIT ") != std::string::npos);
  CHECK(slurp(d / "eval" / "report.txt").find("config.mode = unit") != std::string::npos);

  const fs::path clip = d / "data" / "clips" / "test_m0000_char_02.clip";
  REQUIRE(run({"render", "--in", clip.string(), "--frame", "3", "--plane", "xz", "--out", (d / "f.svg").string()}).code ==
          kExitOk);
  CHECK(slurp(d / "f.svg").rfind("<svg", 0) == 0);
  REQUIRE(run({"render", "--in", clip.string(), "--pred", clip.string(), "--truth", clip.string(), "--out",
               (d / "t.svg").string()})
              .code == kExitOk);
  CHECK(slurp(d / "t.svg").find("Ground truth") != std::string::npos);

  r = run({"--isa", "scalar", "gradcheck", "--seed", "1", "--trials", "1"});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("composite encode-decode-loss (transposed)") != std::string::npos);
  CHECK(r.out.find("FAIL") == std::string::npos);

  r = run({"--help"});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("gen-data") != std::string::npos);
}
