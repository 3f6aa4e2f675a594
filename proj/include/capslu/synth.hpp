#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "capslu/dataset.hpp"
#include "capslu/features.hpp"

namespace capslu {

/// Command corpus generated directly in feature space.
struct SynthConfig {
  std::size_t vocab_size = 20;  ///< total words; those beyond the label words are fillers
  std::size_t n_actions = 3;
  std::size_t n_slots = 2;
  std::size_t values_per_slot = 4;
  std::size_t n_per_command = 10;
  double noise_level = 0.3;
  std::size_t feature_dim = 123;
  std::size_t min_word_frames = 20;
  std::size_t max_word_frames = 60;
  std::size_t max_fillers = 2;
  std::size_t max_silence_frames = 10;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t n_labels() const { return n_actions + n_slots * values_per_slot; }
  std::size_t n_commands() const;
};

struct SynthCorpus {
  DatasetManifest manifest;                ///< feature paths are "features/<id>.cslf"
  std::vector<FeatureSequence> features;   ///< parallel to manifest.utterances
  std::vector<std::size_t> command;        ///< command index per utterance

  Corpus corpus() const;
};

/// Every command (one action plus one value per slot) is realized
/// n_per_command times. Each word is a fixed Catmull-Rom trajectory; tokens
/// are time-warped by a factor in [0.8, 1.25], filler words and leading and
/// trailing silence are inserted at random, and Gaussian noise is added.
SynthCorpus generate_synthetic(const SynthConfig& cfg);

/// Writes features/<id>.cslf and manifest.jsonl under `dir`.
void write_synthetic(const std::filesystem::path& dir, const SynthCorpus& corpus);

}  // namespace capslu
