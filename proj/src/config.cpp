#include "mkd/config.hpp"

#include <charconv>
#include <cstdio>
#include <functional>
#include <sstream>

#include "mkd/errors.hpp"

#ifndef MKD_VERSION
#define MKD_VERSION "unknown"
#endif

namespace mkd {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw UsageError("config key '" + key + "': cannot parse '" + value + "' as " + expected);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end || v.empty()) bad_value(key, v, std::is_integral_v<T> ? "an integer" : "a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, v, "a boolean");
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(key, trim(item)));
  if (out.empty()) bad_value(key, v, "a comma-separated list");
  return out;
}

// Wraps enum parsers, which throw ConfigError, so that errors name the key.
template <typename F>
auto parse_enum(const std::string& key, const std::string& v, F parse) {
  try {
    return parse(v);
  } catch (const ConfigError& e) {
    throw UsageError("config key '" + key + "': " + e.what());
  }
}

struct KeyDef {
  std::string name;
  std::function<void(RunConfig&, const std::string& key, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define MKD_DOUBLE(key, field)                                                                                   \
  KeyDef{key, [](RunConfig& c, const std::string& k, const std::string& v) { c.field = parse_number<double>(k, v); }, \
         [](const RunConfig& c) { return num(c.field); }}
#define MKD_INT(key, field)                                                                                   \
  KeyDef{key, [](RunConfig& c, const std::string& k, const std::string& v) { c.field = parse_number<int>(k, v); }, \
         [](const RunConfig& c) { return std::to_string(c.field); }}
#define MKD_BOOL(key, field)                                                                             \
  KeyDef{key, [](RunConfig& c, const std::string& k, const std::string& v) { c.field = parse_bool(k, v); }, \
         [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }}
#define MKD_STRING(key, field)                                                               \
  KeyDef{key, [](RunConfig& c, const std::string&, const std::string& v) { c.field = v; }, \
         [](const RunConfig& c) { return c.field; }}

const std::vector<KeyDef>& key_defs() {
  static const std::vector<KeyDef> defs = {
      MKD_STRING("data_root", data_root),
      MKD_STRING("output_dir", output_dir),
      MKD_STRING("checkpoint", checkpoint),
      MKD_STRING("input_dir", input_dir),
      KeyDef{"seeds",
             [](RunConfig& c, const std::string& k, const std::string& v) {
               c.seeds = parse_list<std::uint64_t>(k, v);
               c.training.seed = c.seeds.front();
             },
             [](const RunConfig& c) { return join(c.seeds); }},
      KeyDef{"mode",
             [](RunConfig& c, const std::string& k, const std::string& v) {
               c.training.mode = parse_enum(k, v, parse_training_mode);
             },
             [](const RunConfig& c) { return to_string(c.training.mode); }},
      MKD_DOUBLE("lambda_cyc", training.lambda_cyc),
      MKD_DOUBLE("lambda_kd1", training.lambda_kd1),
      MKD_DOUBLE("lambda_kd2", training.lambda_kd2),
      MKD_DOUBLE("lr", training.lr),
      MKD_DOUBLE("segmentor_decay", training.segmentor_decay),
      MKD_INT("decay_every", training.decay_every),
      MKD_INT("epochs", training.epochs),
      MKD_INT("batch_size", training.batch_size),
      KeyDef{"gan_variant",
             [](RunConfig& c, const std::string& k, const std::string& v) {
               c.training.gan_variant = parse_enum(k, v, parse_gan_variant);
             },
             [](const RunConfig& c) { return to_string(c.training.gan_variant); }},
      MKD_INT("replay_buffer_size", training.replay_buffer_size),
      MKD_DOUBLE("gan_beta1", training.gan_beta1),
      MKD_DOUBLE("seg_beta1", training.seg_beta1),
      MKD_DOUBLE("beta2", training.beta2),
      MKD_DOUBLE("adam_eps", training.adam_eps),
      MKD_DOUBLE("gen_sup_weight", training.gen_sup_weight),
      MKD_BOOL("augment", training.augment),
      MKD_BOOL("dice_include_background", training.dice_include_background),
      MKD_INT("gen_width", training.gen_width),
      MKD_INT("gen_depth", training.gen_depth),
      MKD_INT("disc_width", training.disc_width),
      MKD_INT("disc_depth", training.disc_depth),
      MKD_INT("seg_width", training.seg_width),
      MKD_INT("seg_depth", training.seg_depth),
      MKD_INT("early_stop_patience", training.early_stop_patience),
      MKD_INT("checkpoint_every", training.checkpoint_every),
      MKD_INT("image_size", experiment.image_size),
      MKD_INT("num_classes", experiment.num_classes),
      MKD_INT("target_count", experiment.target_count),
      MKD_INT("assistant_count", experiment.assistant_count),
      MKD_INT("test_count", experiment.test_count),
      MKD_BOOL("swap_styles", experiment.swap_styles),
      KeyDef{"suite",
             [](RunConfig& c, const std::string& k, const std::string& v) {
               c.suite = parse_enum(k, v, parse_ablation_suite);
             },
             [](const RunConfig& c) { return to_string(c.suite); }},
      KeyDef{"sweep_counts",
             [](RunConfig& c, const std::string& k, const std::string& v) { c.sweep_counts = parse_list<int>(k, v); },
             [](const RunConfig& c) { return join(c.sweep_counts); }},
      KeyDef{"aggregation",
             [](RunConfig& c, const std::string& k, const std::string& v) {
               c.aggregation = parse_enum(k, v, parse_aggregation);
             },
             [](const RunConfig& c) { return to_string(c.aggregation); }},
  };
  return defs;
}

#undef MKD_DOUBLE
#undef MKD_INT
#undef MKD_BOOL
#undef MKD_STRING

const KeyDef& find_key(const std::string& key) {
  for (const KeyDef& d : key_defs()) {
    if (d.name == key) return d;
  }
  throw UsageError("unknown config key '" + key + "'");
}

}  // namespace

std::string to_string(Command c) {
  switch (c) {
    case Command::synth: return "synth";
    case Command::train: return "train";
    case Command::eval: return "eval";
    case Command::ablate: return "ablate";
    case Command::sweep: return "sweep";
    case Command::report: return "report";
  }
  return "?";
}

Command parse_command(const std::string& s) {
  for (Command c : {Command::synth, Command::train, Command::eval, Command::ablate, Command::sweep, Command::report}) {
    if (to_string(c) == s) return c;
  }
  throw UsageError("unknown command '" + s + "'");
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const KeyDef& d : key_defs()) k.push_back(d.name);
    return k;
  }();
  return keys;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  find_key(key).set(cfg, key, value);
}

std::string get_config_value(const RunConfig& cfg, const std::string& key) { return find_key(key).get(cfg); }

void RunConfig::validate() const {
  auto wrap = [](auto&& fn) {
    try {
      fn();
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
  };
  wrap([&] {
    TrainingConfig t = training;
    if (t.checkpoint_dir.empty()) t.checkpoint_dir = output_dir.empty() ? "." : output_dir + "/checkpoints";
    t.validate();
  });
  auto require = [](bool ok, const std::string& key, const std::string& why) {
    if (!ok) throw UsageError("config key '" + key + "': " + why);
  };
  require(experiment.image_size >= 16, "image_size", "must be >= 16");
  require(experiment.num_classes >= 2 && experiment.num_classes <= 255, "num_classes", "must be in [2, 255]");
  require(experiment.target_count >= 1, "target_count", "must be >= 1");
  require(experiment.assistant_count >= 1, "assistant_count", "must be >= 1");
  require(experiment.test_count >= 1, "test_count", "must be >= 1");
  require(!seeds.empty(), "seeds", "must not be empty");
  switch (command) {
    case Command::synth: require(!data_root.empty(), "data_root", "required by synth"); break;
    case Command::train:
      require(!data_root.empty(), "data_root", "required by train");
      require(!output_dir.empty(), "output_dir", "required by train");
      break;
    case Command::eval:
      require(!checkpoint.empty(), "checkpoint", "required by eval");
      require(!data_root.empty(), "data_root", "required by eval");
      require(!output_dir.empty(), "output_dir", "required by eval");
      break;
    case Command::ablate:
    case Command::sweep: require(!output_dir.empty(), "output_dir", "required by " + to_string(command)); break;
    case Command::report:
      require(!input_dir.empty(), "input_dir", "required by report");
      require(!output_dir.empty(), "output_dir", "required by report");
      break;
  }
  if (command == Command::sweep) {
    for (int n : sweep_counts) {
      require(n >= 1 && n <= experiment.assistant_count, "sweep_counts",
              "every count must be in [1, assistant_count]");
    }
  }
}

RunConfig parse_config(Command command, const std::string& file_text,
                       const std::vector<std::pair<std::string, std::string>>& overrides) {
  RunConfig cfg;
  cfg.command = command;
  std::istringstream is(file_text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    }
    set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  for (const auto& [k, v] : overrides) set_config_value(cfg, k, v);
  cfg.validate();
  return cfg;
}

std::string echo_config(const RunConfig& cfg) {
  std::string out;
  for (const KeyDef& d : key_defs()) out += d.name + "=" + d.get(cfg) + "\n";
  return out;
}

std::string version_string() { return MKD_VERSION; }

}  // namespace mkd
