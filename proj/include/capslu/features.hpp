#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "capslu/tensor.hpp"

namespace capslu {

class AudioFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AudioClip {
  std::vector<float> samples;  ///< mono, in [-1, 1]
  int sample_rate = 16000;
};

struct FeatureConfig {
  std::size_t n_mels = 40;
  double window_len = 0.025;   ///< seconds
  double window_step = 0.010;  ///< seconds
  std::size_t delta_window = 2;
  double vad_threshold = 0.05;   ///< fraction of the median frame energy
  double vad_min_silence = 0.3;  ///< seconds
  bool apply_vad = true;

  void validate() const;
  /// Static + delta + delta-delta width: 3 * (n_mels + 1).
  std::size_t feature_dim() const { return 3 * (n_mels + 1); }
};

/// T x D frame matrix.
struct FeatureSequence {
  Tensor<float> frames;  ///< [T, D]
  double frame_step = 0.010;

  std::size_t length() const { return frames.dim(0); }
  std::size_t dim() const { return frames.dim(1); }
};

/// Natural-log floor applied to filterbank and energy outputs.
inline constexpr double kLogFloor = 1e-10;

AudioClip load_wav(const std::filesystem::path& path);
/// Writes 16-bit mono PCM; samples are clipped to [-1, 1).
void write_wav(const std::filesystem::path& path, const AudioClip& clip);

/// Samples per analysis window and per hop for a clip's rate.
std::size_t window_samples(const FeatureConfig& cfg, int sample_rate);
std::size_t step_samples(const FeatureConfig& cfg, int sample_rate);
/// Number of full windows that fit in `n` samples (0 if none).
std::size_t frame_count(std::size_t n, std::size_t window, std::size_t step);

/// HTK mel scale.
double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Triangular filter weights, [n_mels, fft_size / 2 + 1], spanning 0 Hz to Nyquist.
Tensor<double> mel_filterbank(std::size_t n_mels, std::size_t fft_size, int sample_rate);

/// Per frame: n_mels log filterbank outputs of the Hamming-windowed magnitude
/// spectrum followed by the log frame energy. Result is [T, n_mels + 1].
Tensor<double> log_mel_energy(const AudioClip& clip, const FeatureConfig& cfg);

/// Regression deltas with edge replication; output columns are [static, delta, delta-delta].
template <typename T>
Tensor<T> append_deltas(const Tensor<T>& statics, std::size_t delta_window);

/// Drops runs of low-energy frames longer than cfg.vad_min_silence.
/// A frame is silent when its energy is at most vad_threshold times the
/// median frame energy. At least one window of samples always survives.
AudioClip apply_vad(const AudioClip& clip, const FeatureConfig& cfg);

/// Full pipeline: optional VAD, log-mel + energy, deltas.
FeatureSequence extract_features(const AudioClip& clip, const FeatureConfig& cfg);

struct NormStats {
  std::vector<float> mean;
  std::vector<float> stddev;

  std::size_t dim() const { return mean.size(); }
  bool empty() const { return mean.empty(); }
  static NormStats identity(std::size_t dim);
};

inline constexpr double kStdFloor = 1e-8;

/// Per-dimension mean and population standard deviation over all frames.
NormStats compute_norm_stats(std::span<const FeatureSequence> seqs);
FeatureSequence normalize(const FeatureSequence& feats, const NormStats& stats);

/// Cached feature file: "CSLF", version, T, D, frame_step, then T*D little-endian f32.
void write_feature_file(const std::filesystem::path& path, const FeatureSequence& feats);
FeatureSequence read_feature_file(const std::filesystem::path& path);

}  // namespace capslu
