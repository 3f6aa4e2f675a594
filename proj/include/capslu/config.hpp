#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "capslu/experiment.hpp"
#include "capslu/features.hpp"
#include "capslu/model.hpp"
#include "capslu/synth.hpp"
#include "capslu/trainer.hpp"

namespace capslu {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
  std::size_t n_blocks = 10;
  std::size_t repeats = 5;
  SplitObjective objective = SplitObjective::mean;
  double lowess_frac = 0.5;
  std::size_t lowess_iters = 2;
  std::vector<std::string> models{"capsule", "baseline"};
  /// Training block counts to sweep; empty means 1 .. n_blocks-1.
  std::vector<std::size_t> train_blocks;
};

/// Everything a command can be configured with. One root seed drives all randomness.
struct RunConfig {
  std::uint64_t seed = 0;
  FeatureConfig features;
  ModelConfig model;
  TrainConfig train;
  ExperimentConfig experiment;
  SynthConfig synth;

  /// Sets "section.key" (or "seed") from text; unknown keys throw ConfigError.
  void set(const std::string& key, const std::string& value);
  /// Applies an override of the form "section.key=value".
  void apply_override(const std::string& assignment);
  void validate() const;

  /// Fully resolved configuration in the same format the parser reads.
  std::string to_text() const;

  static std::vector<std::string> keys();
};

/// Parses "[section]" headers and "key = value" lines; '#' and ';' start comments.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

}  // namespace capslu
