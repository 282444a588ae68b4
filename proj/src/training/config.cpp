#include <cstdio>
#include <fstream>
#include <sstream>

#include "mrt/text.hpp"
#include "mrt/training.hpp"

namespace mrt {

namespace {

double number(std::string_view key, std::string_view value) {
  const auto v = parse_number(value);
  if (!v) throw ConfigError("config key '" + std::string(key) + "': expected a number, found '" + std::string(value) + "'");
  return *v;
}

template <typename Int>
Int integer(std::string_view key, std::string_view value) {
  const auto v = parse_integer<Int>(value);
  if (!v) {
    throw ConfigError("config key '" + std::string(key) + "': expected a non-negative integer, found '" +
                      std::string(value) + "'");
  }
  return *v;
}

std::array<std::size_t, 3> channel_list(std::string_view key, std::string_view value) {
  std::array<std::size_t, 3> out{};
  std::size_t k = 0;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = value.find(',', start);
    const std::string_view part = trim(value.substr(start, comma == std::string_view::npos ? value.npos : comma - start));
    if (k == 3) throw ConfigError("config key '" + std::string(key) + "': expected three comma-separated widths");
    out[k++] = integer<std::size_t>(key, part);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  if (k != 3) throw ConfigError("config key '" + std::string(key) + "': expected three comma-separated widths");
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("config: learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("config: beta1 and beta2 must lie in [0, 1)");
  }
  if (steps < 1) throw ConfigError("config: steps must be at least 1");
  if (batch_size < 1) throw ConfigError("config: batch_size must be at least 1");
  for (double w : {weights.cycle, weights.vae, weights.latent_cycle, weights.latent}) {
    if (!(w >= 0.0)) throw ConfigError("config: loss weights must be non-negative");
  }
  try {
    hyper.validate();
  } catch (const ShapeError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

void set_config_value(TrainConfig& cfg, std::string_view key, std::string_view value) {
  value = trim(value);
  try {
    if (key == "mode") {
      cfg.mode = parse_mode(value);
    } else if (key == "steps") {
      cfg.steps = integer<std::size_t>(key, value);
    } else if (key == "batch_size") {
      cfg.batch_size = integer<std::size_t>(key, value);
    } else if (key == "learning_rate") {
      cfg.learning_rate = number(key, value);
    } else if (key == "beta1") {
      cfg.beta1 = number(key, value);
    } else if (key == "beta2") {
      cfg.beta2 = number(key, value);
    } else if (key == "lambda_cyc") {
      cfg.weights.cycle = number(key, value);
    } else if (key == "lambda_vae") {
      cfg.weights.vae = number(key, value);
    } else if (key == "lambda_cc") {
      cfg.weights.latent_cycle = number(key, value);
    } else if (key == "lambda_z") {
      cfg.weights.latent = number(key, value);
    } else if (key == "seed") {
      cfg.seed = integer<std::uint64_t>(key, value);
    } else if (key == "checkpoint_every") {
      cfg.checkpoint_every = integer<std::size_t>(key, value);
    } else if (key == "dataset") {
      cfg.dataset = std::string(value);
    } else if (key == "channels") {
      cfg.hyper.channels = channel_list(key, value);
    } else if (key == "latent_dim") {
      cfg.hyper.latent_dim = integer<std::size_t>(key, value);
    } else if (key == "frames") {
      cfg.hyper.frames = integer<std::size_t>(key, value);
    } else if (key == "variant") {
      cfg.hyper.variant = parse_up_variant(value);
    } else {
      throw ConfigError("unknown config key '" + std::string(key) + "'");
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError("config key '" + std::string(key) + "': " + e.what());
  }
}

TrainConfig parse_config(std::string_view text, const std::string& source) {
  TrainConfig cfg;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t nl = text.find('\n', start);
    std::string_view line = text.substr(start, nl == std::string_view::npos ? text.npos : nl - start);
    start = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const auto where = source + ": line " + std::to_string(line_no) + ": ";
    if (eq == std::string_view::npos) throw ConfigError(where + "expected 'key = value'");
    try {
      set_config_value(cfg, trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return cfg;
}

TrainConfig read_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::string format_config(const TrainConfig& cfg) {
  std::string out;
  const auto put = [&](const char* key, const std::string& v) { out += std::string(key) + " = " + v + "\n"; };
  put("mode", to_string(cfg.mode));
  put("steps", std::to_string(cfg.steps));
  put("batch_size", std::to_string(cfg.batch_size));
  put("learning_rate", format_number(cfg.learning_rate));
  put("beta1", format_number(cfg.beta1));
  put("beta2", format_number(cfg.beta2));
  put("lambda_cyc", format_number(cfg.weights.cycle));
  put("lambda_vae", format_number(cfg.weights.vae));
  put("lambda_cc", format_number(cfg.weights.latent_cycle));
  put("lambda_z", format_number(cfg.weights.latent));
  put("seed", std::to_string(cfg.seed));
  put("checkpoint_every", std::to_string(cfg.checkpoint_every));
  put("dataset", cfg.dataset.string());
  const auto& c = cfg.hyper.channels;
  put("channels", std::to_string(c[0]) + "," + std::to_string(c[1]) + "," + std::to_string(c[2]));
  put("latent_dim", std::to_string(cfg.hyper.latent_dim));
  put("frames", std::to_string(cfg.hyper.frames));
  put("variant", to_string(cfg.hyper.variant));
  return out;
}

std::string config_hash(const TrainConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : format_config(cfg)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace mrt
