#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "mkd/eval.hpp"
#include "mkd/trainer.hpp"

namespace mkd {

enum class Command { synth, train, eval, ablate, sweep, report };

std::string to_string(Command c);
/// Throws UsageError for an unknown command name.
Command parse_command(const std::string& s);

struct RunConfig {
  Command command = Command::train;
  std::string data_root;   ///< synth writes here; train/eval read target/, assistant/, test/ below it
  std::string output_dir;  ///< metrics, checkpoints, reports, manifest
  std::string checkpoint;  ///< eval input; train resumes from it when set
  std::string input_dir;   ///< report: directory holding a previous run's outputs

  TrainingConfig training;
  ExperimentSpec experiment;
  std::vector<std::uint64_t> seeds{0};

  AblationSuite suite = AblationSuite::full;
  std::vector<int> sweep_counts{10, 20, 40};
  Aggregation aggregation = Aggregation::micro;

  void validate() const;
};

/// Names of every recognised config key, in echo order.
const std::vector<std::string>& config_keys();

/// Sets one key from its text value. Throws UsageError naming the key when
/// the key is unknown or the value does not parse.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& cfg, const std::string& key);

/// key=value lines; blank lines and lines starting with '#' are ignored.
/// Later `overrides` win over file values. The result is validated.
RunConfig parse_config(Command command, const std::string& file_text,
                       const std::vector<std::pair<std::string, std::string>>& overrides = {});

/// Every key with its resolved value, one `key=value` per line; parseable by parse_config.
std::string echo_config(const RunConfig& cfg);

/// Build identifier, `git describe` output when available.
std::string version_string();

/// Runs the command's pipeline. Returns 0 on success. Errors propagate as
/// exceptions; `log` receives progress lines.
int dispatch(const RunConfig& cfg, std::ostream& log);

}  // namespace mkd
