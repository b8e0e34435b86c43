// mkd: synthesize phantoms, train, evaluate, run ablations / sweeps, and
// regenerate reports.
//
//   mkd synth  --data_root data
//   mkd train  --data_root data --output_dir runs/a [--config run.cfg] [--epochs 20]
//   mkd eval   --data_root data --checkpoint runs/a/checkpoint.bin --output_dir runs/a
//   mkd report --input_dir runs/a --output_dir runs/a/report

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "mkd/config.hpp"
#include "mkd/errors.hpp"

namespace {

std::string read_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw mkd::UsageError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modality segmentation with translation and mutual distillation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", mkd::version_string());

  struct Parsed {
    std::string config_file;
    std::map<std::string, std::string> flags;
  };
  std::map<std::string, Parsed> parsed;

  const std::pair<const char*, const char*> commands[] = {
      {"synth", "write phantom target/assistant/test sets under data_root"},
      {"train", "train one mode on data_root, write checkpoint and metrics to output_dir"},
      {"eval", "Dice of a checkpoint on data_root/test"},
      {"ablate", "train and evaluate the ablation suite on fresh phantoms per seed"},
      {"sweep", "ensemble Dice per assistant-sample count"},
      {"report", "SVG charts and a text summary from a run directory"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    Parsed& p = parsed[name];
    sub->add_option("--config", p.config_file, "key=value config file; flags override it");
    for (const std::string& key : mkd::config_keys()) {
      sub->add_option("--" + key, p.flags[key]);
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  CLI::App* chosen = app.get_subcommands().front();
  const std::string name = chosen->get_name();
  try {
    const Parsed& p = parsed.at(name);
    std::vector<std::pair<std::string, std::string>> overrides;
    for (const std::string& key : mkd::config_keys()) {
      if (chosen->count("--" + key) > 0) overrides.emplace_back(key, p.flags.at(key));
    }
    const std::string text = p.config_file.empty() ? std::string() : read_file(p.config_file);
    const mkd::RunConfig cfg = mkd::parse_config(mkd::parse_command(name), text, overrides);
    return mkd::dispatch(cfg, std::cout);
  } catch (const mkd::UsageError& e) {
    std::cerr << "mkd " << name << ": usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "mkd " << name << ": error: " << e.what() << "\n";
    return 1;
  }
}
