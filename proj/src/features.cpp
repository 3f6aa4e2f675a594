#include "capslu/features.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <mutex>
#include <string>

#include "capslu/binary_io.hpp"

namespace capslu {

namespace {

// FFTW's planner is not reentrant.
std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

std::vector<double> hamming(std::size_t n) {
  std::vector<double> w(n, 1.0);
  if (n == 1) return w;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = 0.54 - 0.46 * std::cos(2.0 * M_PI * static_cast<double>(i) / static_cast<double>(n - 1));
  }
  return w;
}

std::uint16_t le16(const unsigned char* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }
std::uint32_t le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

void FeatureConfig::validate() const {
  if (n_mels < 1) throw std::invalid_argument("n_mels must be >= 1");
  if (!(window_len > 0.0) || !(window_step > 0.0)) throw std::invalid_argument("window length/step must be positive");
  if (window_step > window_len) throw std::invalid_argument("window_step must not exceed window_len");
  if (delta_window < 1) throw std::invalid_argument("delta_window must be >= 1");
  if (vad_threshold < 0.0 || vad_min_silence < 0.0) throw std::invalid_argument("VAD parameters must be nonnegative");
}

// ---------------------------------------------------------------- WAV

AudioClip load_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw AudioFormatError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw AudioFormatError(path.string() + ": not a RIFF/WAVE file");
  }
  std::size_t pos = 12;
  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* ck = bytes.data() + pos;
    const std::uint32_t len = le32(ck + 4);
    const std::size_t body = pos + 8;
    if (body + len > bytes.size()) {
      // Tolerate a truncated data chunk; anything else is malformed.
      if (std::memcmp(ck, "data", 4) != 0) throw AudioFormatError(path.string() + ": truncated chunk");
    }
    const std::size_t avail = std::min<std::size_t>(len, bytes.size() - body);
    if (std::memcmp(ck, "fmt ", 4) == 0) {
      if (len < 16) throw AudioFormatError(path.string() + ": fmt chunk too short");
      format = le16(ck + 8);
      channels = le16(ck + 10);
      rate = le32(ck + 12);
      bits = le16(ck + 22);
      if (format == 0xFFFE && len >= 40) format = le16(ck + 8 + 24);  // WAVE_FORMAT_EXTENSIBLE subformat
      have_fmt = true;
    } else if (std::memcmp(ck, "data", 4) == 0) {
      data = ck + 8;
      data_len = avail;
    }
    pos = body + len + (len & 1u);
  }
  if (!have_fmt) throw AudioFormatError(path.string() + ": missing fmt chunk");
  if (data == nullptr) throw AudioFormatError(path.string() + ": missing data chunk");
  if (format != 1) throw AudioFormatError(path.string() + ": unsupported encoding (only PCM is supported)");
  if (bits != 16) throw AudioFormatError(path.string() + ": only 16-bit PCM is supported");
  if (channels == 0 || rate == 0) throw AudioFormatError(path.string() + ": invalid channel count or sample rate");
  const std::size_t frame_bytes = 2u * channels;
  const std::size_t n = data_len / frame_bytes;
  if (n == 0) throw AudioFormatError(path.string() + ": zero-length audio");
  AudioClip clip;
  clip.sample_rate = static_cast<int>(rate);
  clip.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      acc += static_cast<std::int16_t>(le16(data + i * frame_bytes + 2 * c)) / 32768.0;
    }
    clip.samples[i] = static_cast<float>(acc / channels);
  }
  return clip;
}

void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
  if (clip.sample_rate <= 0) throw std::invalid_argument("sample rate must be positive");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const auto n = static_cast<std::uint32_t>(clip.samples.size());
  out.write("RIFF", 4);
  io::put<std::uint32_t>(out, 36 + 2 * n);
  out.write("WAVEfmt ", 8);
  io::put<std::uint32_t>(out, 16);
  io::put<std::uint16_t>(out, 1);
  io::put<std::uint16_t>(out, 1);
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(clip.sample_rate));
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(clip.sample_rate) * 2);
  io::put<std::uint16_t>(out, 2);
  io::put<std::uint16_t>(out, 16);
  out.write("data", 4);
  io::put<std::uint32_t>(out, 2 * n);
  for (float s : clip.samples) {
    const double v = std::clamp(std::round(static_cast<double>(s) * 32768.0), -32768.0, 32767.0);
    io::put<std::int16_t>(out, static_cast<std::int16_t>(v));
  }
}

// ---------------------------------------------------------------- framing & filterbank

std::size_t window_samples(const FeatureConfig& cfg, int sample_rate) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.window_len * sample_rate)));
}

std::size_t step_samples(const FeatureConfig& cfg, int sample_rate) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.window_step * sample_rate)));
}

std::size_t frame_count(std::size_t n, std::size_t window, std::size_t step) {
  return n < window ? 0 : 1 + (n - window) / step;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Tensor<double> mel_filterbank(std::size_t n_mels, std::size_t fft_size, int sample_rate) {
  const std::size_t bins = fft_size / 2 + 1;
  const double nyquist = sample_rate / 2.0;
  const double mel_hi = hz_to_mel(nyquist);
  std::vector<double> edges(n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_hi * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  }
  Tensor<double> fb({n_mels, bins});
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / static_cast<double>(fft_size);
      double w = 0.0;
      if (f > lo && f <= mid) w = (f - lo) / (mid - lo);
      else if (f > mid && f < hi) w = (hi - f) / (hi - mid);
      fb[m * bins + k] = w;
    }
  }
  return fb;
}

Tensor<double> log_mel_energy(const AudioClip& clip, const FeatureConfig& cfg) {
  cfg.validate();
  const std::size_t win = window_samples(cfg, clip.sample_rate);
  const std::size_t step = step_samples(cfg, clip.sample_rate);
  const std::size_t frames = frame_count(clip.samples.size(), win, step);
  if (frames == 0) throw std::invalid_argument("clip shorter than one analysis window");
  const std::size_t nfft = next_pow2(win);
  const std::size_t bins = nfft / 2 + 1;
  const Tensor<double> fb = mel_filterbank(cfg.n_mels, nfft, clip.sample_rate);
  const std::vector<double> window = hamming(win);

  double* buf = fftw_alloc_real(nfft);
  fftw_complex* spec = fftw_alloc_complex(bins);
  fftw_plan plan;
  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    plan = fftw_plan_dft_r2c_1d(static_cast<int>(nfft), buf, spec, FFTW_ESTIMATE);
  }

  const std::size_t width = cfg.n_mels + 1;
  Tensor<double> out({frames, width});
  std::vector<double> mag(bins);
  for (std::size_t f = 0; f < frames; ++f) {
    const float* x = clip.samples.data() + f * step;
    double energy = 0.0;
    for (std::size_t i = 0; i < nfft; ++i) {
      const double v = i < win ? static_cast<double>(x[i]) * window[i] : 0.0;
      buf[i] = v;
      energy += v * v;
    }
    fftw_execute(plan);
    for (std::size_t k = 0; k < bins; ++k) mag[k] = std::hypot(spec[k][0], spec[k][1]);
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      double acc = 0.0;
      const double* w = &fb[m * bins];
      for (std::size_t k = 0; k < bins; ++k) acc += w[k] * mag[k];
      out[f * width + m] = std::log(std::max(acc, kLogFloor));
    }
    out[f * width + cfg.n_mels] = std::log(std::max(energy, kLogFloor));
  }

  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(spec);
  fftw_free(buf);
  return out;
}

template <typename T>
Tensor<T> append_deltas(const Tensor<T>& statics, std::size_t delta_window) {
  if (statics.rank() != 2 || statics.dim(0) == 0) throw ShapeError("append_deltas expects a non-empty [T,K] matrix");
  if (delta_window < 1) throw std::invalid_argument("delta_window must be >= 1");
  const std::size_t T_ = statics.dim(0), K = statics.dim(1);
  const long last = static_cast<long>(T_) - 1;
  double denom = 0.0;
  for (std::size_t n = 1; n <= delta_window; ++n) denom += static_cast<double>(n * n);
  denom *= 2.0;

  auto deltas = [&](const std::vector<double>& src) {
    std::vector<double> d(T_ * K, 0.0);
    for (std::size_t t = 0; t < T_; ++t) {
      for (std::size_t k = 0; k < K; ++k) {
        double acc = 0.0;
        for (std::size_t n = 1; n <= delta_window; ++n) {
          const long fwd = std::min<long>(static_cast<long>(t + n), last);
          const long bwd = std::max<long>(static_cast<long>(t) - static_cast<long>(n), 0);
          acc += static_cast<double>(n) * (src[static_cast<std::size_t>(fwd) * K + k] - src[static_cast<std::size_t>(bwd) * K + k]);
        }
        d[t * K + k] = acc / denom;
      }
    }
    return d;
  };

  std::vector<double> s(statics.data().begin(), statics.data().end());
  const std::vector<double> d1 = deltas(s);
  const std::vector<double> d2 = deltas(d1);
  Tensor<T> out({T_, 3 * K});
  for (std::size_t t = 0; t < T_; ++t) {
    for (std::size_t k = 0; k < K; ++k) {
      out[t * 3 * K + k] = static_cast<T>(s[t * K + k]);
      out[t * 3 * K + K + k] = static_cast<T>(d1[t * K + k]);
      out[t * 3 * K + 2 * K + k] = static_cast<T>(d2[t * K + k]);
    }
  }
  return out;
}

template Tensor<float> append_deltas(const Tensor<float>&, std::size_t);
template Tensor<double> append_deltas(const Tensor<double>&, std::size_t);

// ---------------------------------------------------------------- VAD

AudioClip apply_vad(const AudioClip& clip, const FeatureConfig& cfg) {
  const std::size_t win = window_samples(cfg, clip.sample_rate);
  const std::size_t step = step_samples(cfg, clip.sample_rate);
  const std::size_t frames = frame_count(clip.samples.size(), win, step);
  if (frames == 0) return clip;

  std::vector<double> energy(frames, 0.0);
  for (std::size_t f = 0; f < frames; ++f) {
    const float* x = clip.samples.data() + f * step;
    for (std::size_t i = 0; i < win; ++i) energy[f] += static_cast<double>(x[i]) * x[i];
  }
  std::vector<double> sorted = energy;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(frames / 2), sorted.end());
  double median = sorted[frames / 2];
  if (frames % 2 == 0) {
    const double lower = *std::max_element(sorted.begin(), sorted.begin() + static_cast<long>(frames / 2));
    median = 0.5 * (median + lower);
  }
  const double threshold = cfg.vad_threshold * median;

  // Each sample belongs to the hop slot it starts in; the tail joins the last frame.
  std::vector<bool> drop(frames, false);
  const double min_frames = cfg.vad_min_silence / (static_cast<double>(step) / clip.sample_rate);
  std::size_t f = 0;
  bool any_dropped = false;
  while (f < frames) {
    if (energy[f] > threshold) {
      ++f;
      continue;
    }
    std::size_t end = f;
    while (end < frames && energy[end] <= threshold) ++end;
    if (static_cast<double>(end - f) > min_frames) {
      for (std::size_t k = f; k < end; ++k) drop[k] = true;
      any_dropped = true;
    }
    f = end;
  }
  if (!any_dropped) return clip;

  AudioClip out;
  out.sample_rate = clip.sample_rate;
  for (std::size_t i = 0; i < clip.samples.size(); ++i) {
    const std::size_t slot = std::min(i / step, frames - 1);
    if (!drop[slot]) out.samples.push_back(clip.samples[i]);
  }
  if (out.samples.size() < win) {
    // Never return an empty clip: keep the highest-energy window.
    const std::size_t best = static_cast<std::size_t>(std::max_element(energy.begin(), energy.end()) - energy.begin());
    out.samples.assign(clip.samples.begin() + static_cast<long>(best * step),
                       clip.samples.begin() + static_cast<long>(best * step + win));
  }
  return out;
}

FeatureSequence extract_features(const AudioClip& clip, const FeatureConfig& cfg) {
  const AudioClip trimmed = cfg.apply_vad ? apply_vad(clip, cfg) : clip;
  const Tensor<double> statics = log_mel_energy(trimmed, cfg);
  FeatureSequence fs;
  fs.frames = append_deltas(statics, cfg.delta_window).cast<float>();
  fs.frame_step = cfg.window_step;
  return fs;
}

// ---------------------------------------------------------------- normalization

NormStats NormStats::identity(std::size_t dim) {
  return NormStats{std::vector<float>(dim, 0.0f), std::vector<float>(dim, 1.0f)};
}

NormStats compute_norm_stats(std::span<const FeatureSequence> seqs) {
  if (seqs.empty()) throw std::invalid_argument("cannot compute normalization statistics of an empty set");
  const std::size_t D = seqs.front().dim();
  std::vector<double> sum(D, 0.0), sq(D, 0.0);
  std::size_t count = 0;
  for (const FeatureSequence& s : seqs) {
    if (s.dim() != D) throw ShapeError("feature dimension mismatch while computing statistics");
    for (std::size_t t = 0; t < s.length(); ++t) {
      for (std::size_t d = 0; d < D; ++d) sum[d] += s.frames[t * D + d];
    }
    count += s.length();
  }
  if (count == 0) throw std::invalid_argument("no frames to compute statistics from");
  NormStats st;
  st.mean.resize(D);
  st.stddev.resize(D);
  for (std::size_t d = 0; d < D; ++d) sum[d] /= static_cast<double>(count);
  for (const FeatureSequence& s : seqs) {
    for (std::size_t t = 0; t < s.length(); ++t) {
      for (std::size_t d = 0; d < D; ++d) {
        const double c = s.frames[t * D + d] - sum[d];
        sq[d] += c * c;
      }
    }
  }
  for (std::size_t d = 0; d < D; ++d) {
    st.mean[d] = static_cast<float>(sum[d]);
    st.stddev[d] = static_cast<float>(std::max(std::sqrt(sq[d] / static_cast<double>(count)), kStdFloor));
  }
  return st;
}

FeatureSequence normalize(const FeatureSequence& feats, const NormStats& stats) {
  const std::size_t D = feats.dim();
  if (stats.dim() != D || stats.stddev.size() != D) {
    throw ShapeError("normalization stats have dimension " + std::to_string(stats.dim()) + ", features have " +
                     std::to_string(D));
  }
  FeatureSequence out = feats;
  for (std::size_t t = 0; t < feats.length(); ++t) {
    for (std::size_t d = 0; d < D; ++d) {
      const double sd = std::max(static_cast<double>(stats.stddev[d]), kStdFloor);
      out.frames[t * D + d] = static_cast<float>((feats.frames[t * D + d] - stats.mean[d]) / sd);
    }
  }
  return out;
}

// ---------------------------------------------------------------- cache files

void write_feature_file(const std::filesystem::path& path, const FeatureSequence& feats) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  io::put_magic(out, "CSLF");
  io::put<std::uint32_t>(out, 1);
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(feats.length()));
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(feats.dim()));
  io::put<double>(out, feats.frame_step);
  out.write(reinterpret_cast<const char*>(feats.frames.data().data()),
            static_cast<std::streamsize>(feats.frames.size() * sizeof(float)));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

FeatureSequence read_feature_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  if (io::get_magic(in) != "CSLF") throw io::FormatError(path.string() + ": not a feature file");
  const auto version = io::get<std::uint32_t>(in);
  if (version != 1) throw io::FormatError(path.string() + ": unsupported feature file version");
  const auto T_ = io::get<std::uint32_t>(in);
  const auto D = io::get<std::uint32_t>(in);
  if (T_ == 0 || D == 0) throw io::FormatError(path.string() + ": empty feature matrix");
  FeatureSequence fs;
  fs.frame_step = io::get<double>(in);
  fs.frames = Tensor<float>({T_, D});
  if (!in.read(reinterpret_cast<char*>(fs.frames.data().data()), static_cast<std::streamsize>(fs.frames.size() * sizeof(float)))) {
    throw io::FormatError(path.string() + ": truncated feature data");
  }
  return fs;
}

}  // namespace capslu
