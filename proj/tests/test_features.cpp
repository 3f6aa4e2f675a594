#include <cmath>
#include <complex>
#include <cstdint>
#include <fstream>
#include <numeric>

#include "capslu/features.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace capslu;

namespace {

void put16(std::ofstream& o, std::uint16_t v) { o.put(static_cast<char>(v & 0xff)).put(static_cast<char>(v >> 8)); }
void put32(std::ofstream& o, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) o.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

/// Writes a canonical 44-byte-header WAV; `channels` interleaved int16 samples.
void write_pcm(const std::filesystem::path& path, const std::vector<std::int16_t>& samples, int rate,
               std::uint16_t channels = 1, std::uint16_t format = 1, std::uint16_t bits = 16) {
  std::ofstream o(path, std::ios::binary);
  const auto bytes = static_cast<std::uint32_t>(samples.size() * 2);
  o.write("RIFF", 4);
  put32(o, 36 + bytes);
  o.write("WAVEfmt ", 8);
  put32(o, 16);
  put16(o, format);
  put16(o, channels);
  put32(o, static_cast<std::uint32_t>(rate));
  put32(o, static_cast<std::uint32_t>(rate) * channels * 2);
  put16(o, static_cast<std::uint16_t>(channels * 2));
  put16(o, bits);
  o.write("data", 4);
  put32(o, bytes);
  for (std::int16_t s : samples) put16(o, static_cast<std::uint16_t>(s));
}

double mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double inv_mel(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

/// Direct DFT of each Hamming-windowed frame, triangular mel weights from the
/// band edges, natural log with floor, log energy last.
std::vector<std::vector<double>> mel_oracle(const AudioClip& clip, std::size_t n_mels, std::size_t win,
                                            std::size_t step) {
  std::size_t nfft = 1;
  while (nfft < win) nfft *= 2;
  const std::size_t bins = nfft / 2 + 1;
  const double sr = clip.sample_rate;
  std::vector<double> centers(n_mels + 2);
  for (std::size_t i = 0; i < centers.size(); ++i) centers[i] = inv_mel(mel(sr / 2) * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  std::vector<std::vector<double>> out;
  for (std::size_t start = 0; start + win <= clip.samples.size(); start += step) {
    std::vector<double> x(win);
    double energy = 0;
    for (std::size_t i = 0; i < win; ++i) {
      x[i] = clip.samples[start + i] * (0.54 - 0.46 * std::cos(2 * M_PI * static_cast<double>(i) / static_cast<double>(win - 1)));
      energy += x[i] * x[i];
    }
    std::vector<double> mag(bins);
    for (std::size_t k = 0; k < bins; ++k) {
      std::complex<double> acc = 0;
      for (std::size_t i = 0; i < win; ++i) acc += x[i] * std::polar(1.0, -2 * M_PI * static_cast<double>(k * i % nfft) / static_cast<double>(nfft));
      mag[k] = std::abs(acc);
    }
    std::vector<double> row;
    for (std::size_t m = 0; m < n_mels; ++m) {
      double acc = 0;
      for (std::size_t k = 0; k < bins; ++k) {
        const double f = static_cast<double>(k) * sr / static_cast<double>(nfft);
        const double lo = centers[m], c = centers[m + 1], hi = centers[m + 2];
        double w = 0;
        if (f > lo && f <= c) w = (f - lo) / (c - lo);
        if (f > c && f < hi) w = (hi - f) / (hi - c);
        acc += w * mag[k];
      }
      row.push_back(std::log(std::max(acc, 1e-10)));
    }
    row.push_back(std::log(std::max(energy, 1e-10)));
    out.push_back(row);
  }
  return out;
}

/// Relative disagreement measured on the underlying (exponentiated) energies.
double rel_err(double got_log, double want_log) {
  return std::abs(std::expm1(got_log - want_log));
}

AudioClip tone(double hz, double seconds, int rate, double amp = 0.5) {
  AudioClip c;
  c.sample_rate = rate;
  c.samples.resize(static_cast<std::size_t>(seconds * rate));
  for (std::size_t i = 0; i < c.samples.size(); ++i) c.samples[i] = static_cast<float>(amp * std::sin(2 * M_PI * hz * static_cast<double>(i) / rate));
  return c;
}

std::vector<std::vector<double>> delta_oracle(const std::vector<std::vector<double>>& x, int W) {
  const int T = static_cast<int>(x.size());
  const std::size_t K = x[0].size();
  std::vector<std::vector<double>> d(x.size(), std::vector<double>(K, 0.0));
  double den = 0;
  for (int n = 1; n <= W; ++n) den += n * n;
  for (int t = 0; t < T; ++t)
    for (std::size_t k = 0; k < K; ++k) {
      double s = 0;
      for (int n = 1; n <= W; ++n) s += n * (x[static_cast<std::size_t>(std::min(t + n, T - 1))][k] - x[static_cast<std::size_t>(std::max(t - n, 0))][k]);
      d[static_cast<std::size_t>(t)][k] = s / (2 * den);
    }
  return d;
}

}  // namespace

TEST_SUITE("features") {
  TEST_CASE("wav: zeros, full scale and the sample scale") {
    const auto dir = testing::tmp_dir("wav");
    write_pcm(dir / "zero.wav", std::vector<std::int16_t>(16000, 0), 16000);
    AudioClip z = load_wav(dir / "zero.wav");
    CHECK(z.sample_rate == 16000);
    CHECK(z.samples.size() == 16000);
    for (float v : z.samples) CHECK(v == 0.0f);

    write_pcm(dir / "max.wav", {32767, -32768, 1}, 8000);
    AudioClip m = load_wav(dir / "max.wav");
    CHECK(m.sample_rate == 8000);
    CHECK(m.samples[0] == static_cast<float>(32767.0 / 32768.0));
    CHECK(m.samples[1] == -1.0f);
    CHECK(m.samples[2] == static_cast<float>(1.0 / 32768.0));
  }

  TEST_CASE("wav: sine round trip and stereo mixdown") {
    const auto dir = testing::tmp_dir("wav2");
    AudioClip s = tone(440, 0.25, 16000, 0.8);
    std::vector<std::int16_t> pcm;
    for (float v : s.samples) pcm.push_back(static_cast<std::int16_t>(std::lround(v * 32768.0)));
    write_pcm(dir / "sine.wav", pcm, 16000);
    AudioClip back = load_wav(dir / "sine.wav");
    REQUIRE(back.samples.size() == s.samples.size());
    for (std::size_t i = 0; i < s.samples.size(); ++i) CHECK(std::abs(back.samples[i] - s.samples[i]) <= 0.5 / 32768 + 1e-7);

    write_wav(dir / "lib.wav", s);
    AudioClip again = load_wav(dir / "lib.wav");
    for (std::size_t i = 0; i < s.samples.size(); ++i) CHECK(std::abs(again.samples[i] - s.samples[i]) <= 1.0 / 32768);

    write_pcm(dir / "stereo.wav", {1000, 3000, -200, 200}, 16000, 2);
    AudioClip st = load_wav(dir / "stereo.wav");
    REQUIRE(st.samples.size() == 2);
    CHECK(st.samples[0] == static_cast<float>(2000.0 / 32768.0));
    CHECK(st.samples[1] == 0.0f);
  }

  TEST_CASE("wav: malformed and unsupported input") {
    const auto dir = testing::tmp_dir("wav3");
    {
      std::ofstream o(dir / "junk.wav", std::ios::binary);
      o << "this is not audio";
    }
    CHECK_THROWS_AS(load_wav(dir / "junk.wav"), AudioFormatError);
    CHECK_THROWS_AS(load_wav(dir / "missing.wav"), AudioFormatError);
    write_pcm(dir / "float.wav", {0, 0, 0, 0}, 16000, 1, 3);
    CHECK_THROWS_AS(load_wav(dir / "float.wav"), AudioFormatError);
    write_pcm(dir / "pcm8.wav", {0, 0}, 16000, 1, 1, 8);
    CHECK_THROWS_AS(load_wav(dir / "pcm8.wav"), AudioFormatError);
    write_pcm(dir / "empty.wav", {}, 16000);
    CHECK_THROWS_AS(load_wav(dir / "empty.wav"), AudioFormatError);
  }

  TEST_CASE("mel scale") {
    CHECK(hz_to_mel(0) == 0.0);
    CHECK(hz_to_mel(700) == doctest::Approx(2595 * std::log10(2.0)));
    for (double f : {10.0, 440.0, 3999.0, 8000.0}) CHECK(mel_to_hz(hz_to_mel(f)) == doctest::Approx(f).epsilon(1e-12));
    const Tensor<double> fb = mel_filterbank(40, 512, 16000);
    CHECK(fb.shape() == Shape{40, 257});
    for (double w : fb.data()) CHECK((w >= 0.0 && w <= 1.0));
  }

  TEST_CASE("log-mel energies match a direct DFT oracle") {
    FeatureConfig cfg;
    Rng rng(61);
    AudioClip noise;
    noise.sample_rate = 16000;
    for (int i = 0; i < 4000; ++i) noise.samples.push_back(static_cast<float>(rng.normal(0.0, 0.1)));
    for (const AudioClip& clip : {noise, tone(1000, 0.2, 16000), tone(333, 0.15, 8000)}) {
      const Tensor<double> got = log_mel_energy(clip, cfg);
      const auto want = mel_oracle(clip, 40, window_samples(cfg, clip.sample_rate), step_samples(cfg, clip.sample_rate));
      REQUIRE(got.dim(0) == want.size());
      double worst = 0;
      for (std::size_t t = 0; t < want.size(); ++t)
        for (std::size_t m = 0; m < 41; ++m) {
          if (want[t][m] <= std::log(1e-10) + 1e-9) continue;  // floor on both sides
          worst = std::max(worst, rel_err(got.at({t, m}), want[t][m]));
        }
      CHECK(worst <= 1e-6);
    }
  }

  TEST_CASE("a tone at a filter center peaks in that filter") {
    FeatureConfig cfg;
    const double top = hz_to_mel(8000.0);
    for (std::size_t k : {15u, 25u, 35u}) {
      const double center = mel_to_hz(top * static_cast<double>(k + 1) / 41.0);
      const Tensor<double> out = log_mel_energy(tone(center, 0.1, 16000), cfg);
      for (std::size_t t = 0; t < out.dim(0); ++t) {
        std::size_t arg = 0;
        for (std::size_t m = 1; m < 40; ++m)
          if (out.at({t, m}) > out.at({t, arg})) arg = m;
        CHECK(arg == k);
      }
    }
  }

  TEST_CASE("silence hits the floor and scaling shifts columns") {
    FeatureConfig cfg;
    AudioClip z;
    z.samples.assign(1600, 0.0f);
    const Tensor<double> lz = log_mel_energy(z, cfg);
    for (double v : lz.data()) CHECK(v == std::log(kLogFloor));

    Rng rng(63);
    AudioClip a;
    for (int i = 0; i < 3200; ++i) a.samples.push_back(static_cast<float>(rng.normal(0.0, 0.1)));
    AudioClip b = a;
    for (float& v : b.samples) v *= 2.0f;
    const Tensor<double> la = log_mel_energy(a, cfg), lb = log_mel_energy(b, cfg);
    for (std::size_t t = 0; t < la.dim(0); ++t) {
      for (std::size_t m = 0; m < 40; ++m) CHECK(lb.at({t, m}) - la.at({t, m}) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
      CHECK(lb.at({t, 40}) - la.at({t, 40}) == doctest::Approx(std::log(4.0)).epsilon(1e-9));
    }
    AudioClip tiny;
    tiny.samples.assign(100, 0.1f);
    CHECK_THROWS(log_mel_energy(tiny, cfg));
  }

  TEST_CASE("deltas") {
    Tensor<double> c({6, 2}, 3.5);
    const Tensor<double> dc = append_deltas(c, 2);
    CHECK(dc.shape() == Shape{6, 6});
    for (std::size_t t = 0; t < 6; ++t)
      for (std::size_t k = 2; k < 6; ++k) CHECK(dc.at({t, k}) == 0.0);

    Tensor<double> ramp({7, 1});
    for (std::size_t t = 0; t < 7; ++t) ramp[t] = static_cast<double>(t);
    const Tensor<double> dr = append_deltas(ramp, 2);
    for (std::size_t t = 2; t < 5; ++t) {
      CHECK(dr.at({t, 1}) == 1.0);
      CHECK(dr.at({t, 0}) == static_cast<double>(t));
    }

    Rng rng(65);
    for (int W : {1, 2, 3}) {
      std::vector<std::vector<double>> x(10, std::vector<double>(3));
      Tensor<double> xt({10, 3});
      for (std::size_t t = 0; t < 10; ++t)
        for (std::size_t k = 0; k < 3; ++k) xt.at({t, k}) = x[t][k] = rng.uniform(-1, 1);
      const auto d1 = delta_oracle(x, W);
      const auto d2 = delta_oracle(d1, W);
      const Tensor<double> got = append_deltas(xt, static_cast<std::size_t>(W));
      for (std::size_t t = 0; t < 10; ++t)
        for (std::size_t k = 0; k < 3; ++k) {
          CHECK(got.at({t, k}) == x[t][k]);
          CHECK(got.at({t, 3 + k}) == doctest::Approx(d1[t][k]).epsilon(1e-14));
          CHECK(got.at({t, 6 + k}) == doctest::Approx(d2[t][k]).epsilon(1e-14));
        }
      // Permuting static columns permutes every block the same way.
      Tensor<double> perm({10, 3});
      for (std::size_t t = 0; t < 10; ++t)
        for (std::size_t k = 0; k < 3; ++k) perm.at({t, k}) = xt.at({t, (k + 1) % 3});
      const Tensor<double> gp = append_deltas(perm, static_cast<std::size_t>(W));
      for (std::size_t t = 0; t < 10; ++t)
        for (std::size_t blk = 0; blk < 3; ++blk)
          for (std::size_t k = 0; k < 3; ++k) CHECK(gp.at({t, blk * 3 + k}) == got.at({t, blk * 3 + (k + 1) % 3}));
    }

    const Tensor<double> one = append_deltas(Tensor<double>({1, 4}, 2.0), 2);
    for (std::size_t k = 4; k < 12; ++k) CHECK(one[k] == 0.0);
  }

  TEST_CASE("vad keeps the burst and is idempotent") {
    FeatureConfig cfg;
    Rng rng(67);
    const int rate = 16000;
    const std::size_t pad = 6400, burst = 16000;
    AudioClip clip;
    clip.sample_rate = rate;
    for (std::size_t i = 0; i < pad; ++i) clip.samples.push_back(static_cast<float>(rng.normal(0.0, 1e-4)));
    const AudioClip t = tone(500, 1.0, rate);
    clip.samples.insert(clip.samples.end(), t.samples.begin(), t.samples.end());
    for (std::size_t i = 0; i < pad; ++i) clip.samples.push_back(static_cast<float>(rng.normal(0.0, 1e-4)));

    const AudioClip out = apply_vad(clip, cfg);
    const std::size_t win = window_samples(cfg, rate);
    CHECK(out.samples.size() >= burst);
    CHECK(out.samples.size() <= burst + 2 * win);
    // The burst itself survives contiguously.
    auto it = std::search(out.samples.begin(), out.samples.end(), t.samples.begin(), t.samples.end());
    CHECK(it != out.samples.end());
    const AudioClip twice = apply_vad(out, cfg);
    CHECK(twice.samples == out.samples);

    AudioClip short_gaps;
    short_gaps.sample_rate = rate;
    for (int rep = 0; rep < 3; ++rep) {
      short_gaps.samples.insert(short_gaps.samples.end(), t.samples.begin(), t.samples.begin() + 8000);
      short_gaps.samples.insert(short_gaps.samples.end(), 3200, 0.0f);  // 0.2 s
    }
    CHECK(apply_vad(short_gaps, cfg).samples == short_gaps.samples);

    AudioClip zero;
    zero.sample_rate = rate;
    zero.samples.assign(16000, 0.0f);
    CHECK(apply_vad(zero, cfg).samples.size() == win);
  }

  TEST_CASE("full pipeline width") {
    FeatureConfig cfg;
    CHECK(cfg.feature_dim() == 123);
    const FeatureSequence fs = extract_features(tone(300, 0.5, 16000), cfg);
    CHECK(fs.dim() == 123);
    CHECK(fs.length() == frame_count(8000, 400, 160));
    for (float v : fs.frames.data()) CHECK(std::isfinite(v));
    FeatureConfig bad;
    bad.window_step = 0.05;
    CHECK_THROWS(bad.validate());
  }

  TEST_CASE("normalization") {
    Rng rng(69);
    std::vector<FeatureSequence> seqs(3);
    for (std::size_t s = 0; s < 3; ++s) {
      seqs[s].frames = Tensor<float>({5 + s * 4, 3});
      for (std::size_t t = 0; t < seqs[s].length(); ++t) {
        seqs[s].frames.at({t, 0}) = static_cast<float>(rng.normal(5.0, 2.0));
        seqs[s].frames.at({t, 1}) = static_cast<float>(rng.normal(-1.0, 0.1));
        seqs[s].frames.at({t, 2}) = 7.0f;
      }
    }
    const NormStats st = compute_norm_stats(seqs);
    std::vector<double> sum(3, 0.0), sq(3, 0.0);
    std::size_t n = 0;
    for (const auto& s : seqs) {
      const FeatureSequence z = normalize(s, st);
      for (std::size_t t = 0; t < z.length(); ++t) {
        for (std::size_t d = 0; d < 3; ++d) {
          sum[d] += z.frames.at({t, d});
          sq[d] += static_cast<double>(z.frames.at({t, d})) * z.frames.at({t, d});
        }
        CHECK(z.frames.at({t, 2}) == 0.0f);
      }
      n += z.length();
    }
    for (std::size_t d = 0; d < 2; ++d) {
      CHECK(std::abs(sum[d] / n) < 1e-6);
      CHECK(std::abs(std::sqrt(sq[d] / n) - 1.0) < 1e-6);
    }
    const FeatureSequence same = normalize(seqs[0], NormStats::identity(3));
    CHECK(same.frames == seqs[0].frames);
    CHECK_THROWS_AS(normalize(seqs[0], NormStats::identity(4)), ShapeError);
  }

  TEST_CASE("feature file round trip") {
    const auto dir = testing::tmp_dir("cslf");
    Rng rng(71);
    FeatureSequence fs;
    fs.frames = Tensor<float>({4, 5});
    for (float& v : fs.frames.data()) v = static_cast<float>(rng.normal());
    fs.frame_step = 0.02;
    write_feature_file(dir / "a.cslf", fs);
    const FeatureSequence back = read_feature_file(dir / "a.cslf");
    CHECK(back.frames == fs.frames);
    CHECK(back.frame_step == 0.02);
    CHECK(std::filesystem::file_size(dir / "a.cslf") == 4 + 4 * 3 + 8 + 4 * 20);
    {
      std::ofstream o(dir / "bad.cslf", std::ios::binary);
      o << "XXXX";
    }
    CHECK_THROWS(read_feature_file(dir / "bad.cslf"));
  }
}
