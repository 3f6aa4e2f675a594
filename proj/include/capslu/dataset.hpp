#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "capslu/features.hpp"
#include "capslu/slots.hpp"

namespace capslu {

struct Utterance {
  std::string id;
  std::string audio;     ///< WAV path, relative to the manifest directory
  std::string features;  ///< cached CSLF path, relative to the manifest directory
  std::string speaker;
  std::vector<std::string> labels;
};

/// One JSON object per line. The first line is the dataset header
/// {"labels": [...], "slots": [{"name", "labels", "optional"}]}; every further
/// line is an utterance {"id", "audio" or "features", "speaker", "labels"}.
struct DatasetManifest {
  SlotSpec slots;
  std::vector<Utterance> utterances;
  std::filesystem::path base_dir;

  /// Label indices of an utterance, validated against the slot spec.
  std::vector<std::size_t> label_indices(const Utterance& u) const;
  std::filesystem::path resolve(const std::string& rel) const;
};

DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
std::string manifest_text(const DatasetManifest& manifest);

/// An utterance with its features in memory.
struct Example {
  std::string id;
  FeatureSequence features;
  std::vector<std::size_t> labels;  ///< ascending label indices
};

struct Corpus {
  SlotSpec slots;
  std::vector<Example> examples;
};

/// Loads cached features where present, otherwise extracts them from audio.
Corpus load_corpus(const DatasetManifest& manifest, const FeatureConfig& cfg);

/// Multi-hot target vector.
std::vector<float> target_vector(std::span<const std::size_t> labels, std::size_t n_labels);

}  // namespace capslu
