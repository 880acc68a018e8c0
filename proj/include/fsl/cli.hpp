#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "fsl/dataset.hpp"
#include "fsl/fewshot.hpp"
#include "fsl/gradcheck.hpp"
#include "fsl/pipeline.hpp"

namespace fsl {

struct ConfigKey {
  std::string name;  // underscore form; the flag is --name with '-' for '_'
  std::string fallback;
  std::string help;
};

const std::vector<ConfigKey>& config_keys();

using RawConfig = std::map<std::string, std::string>;

// `key = value` lines; '#' starts a comment, blank lines are skipped, keys
// may use '-' or '_'. Unknown keys and malformed lines throw ConfigError.
// A repeated key keeps its last value and appends a warning.
RawConfig parse_config_text(const std::string& text, std::vector<std::string>& warnings);
RawConfig parse_config_file(const std::filesystem::path& path, std::vector<std::string>& warnings);

struct RunConfig {
  TrainConfig train;
  std::string method;
  SyntheticConfig synthetic;
  SplitRatios ratios;
  bool merge_validation = false;
  EpisodeSpec eval;
  std::string eval_split = "novel";
  std::string export_split = "novel";
  std::vector<PerturbKind> perturb;
  int max_severity = 5;
  double fgsm_epsilon = 1.0 / 255.0;
  double percentile = 1.0;
  std::size_t image_index = 0;
  std::filesystem::path dataset;
  std::filesystem::path splits;
  std::filesystem::path checkpoint;
  std::filesystem::path report_dir;
  std::size_t threads = 1;
  // Every key with its effective value, for the run snapshot.
  RawConfig resolved;
};

// Precedence: overrides, then file, then FSL_SEED for the seed, then
// defaults. Throws ConfigError naming the key on an unparsable value.
RunConfig build_config(const RawConfig& file, const RawConfig& overrides);

std::string format_config(const RawConfig& resolved);

// Classes named by "base", "validation", "novel" or "all".
std::vector<std::size_t> split_classes(const SplitSpec& split, const std::string& which, std::size_t class_count);

// Human-readable tables; mean and ci95 are percentages with 2 decimals.
std::string format_eval_table(const std::vector<std::pair<std::string, EvalReport>>& rows);
std::string format_training_table(const TrainState& state);

// Finite-difference checks of every op and loss on small random inputs.
std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed);

// Entry point: exit 0 on success, 1 on runtime failure, 2 on configuration
// error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace fsl
