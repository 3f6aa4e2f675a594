#include "capslu/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>

#include "capslu/rng.hpp"

namespace capslu {

void SynthConfig::validate() const {
  if (n_actions < 1) throw std::invalid_argument("synth: n_actions must be >= 1");
  if (n_slots > 0 && values_per_slot < 1) throw std::invalid_argument("synth: values_per_slot must be >= 1");
  if (n_labels() < 2) throw std::invalid_argument("synth: need at least two labels");
  if (vocab_size < n_labels()) {
    throw std::invalid_argument("synth: vocab_size " + std::to_string(vocab_size) + " is smaller than the " +
                                std::to_string(n_labels()) + " label words");
  }
  if (vocab_size == n_labels() && max_fillers > 0) {
    throw std::invalid_argument("synth: max_fillers > 0 requires vocab_size above the label word count");
  }
  if (n_per_command < 1) throw std::invalid_argument("synth: n_per_command must be >= 1");
  if (!(noise_level >= 0.0)) throw std::invalid_argument("synth: noise_level must be nonnegative");
  if (feature_dim < 1) throw std::invalid_argument("synth: feature_dim must be >= 1");
  if (min_word_frames < 2 || max_word_frames < min_word_frames) {
    throw std::invalid_argument("synth: need 2 <= min_word_frames <= max_word_frames");
  }
  if (n_commands() > 1000000) throw std::invalid_argument("synth: too many commands");
}

std::size_t SynthConfig::n_commands() const {
  std::size_t n = n_actions;
  for (std::size_t s = 0; s < n_slots; ++s) n *= values_per_slot;
  return n;
}

namespace {

struct Word {
  std::vector<std::vector<double>> knots;  ///< control points in feature space
  std::size_t frames = 0;
};

Word make_word(Rng& rng, const SynthConfig& cfg) {
  Word w;
  w.frames = static_cast<std::size_t>(rng.range(static_cast<long>(cfg.min_word_frames), static_cast<long>(cfg.max_word_frames)));
  const std::size_t n_knots = 4 + rng.index(3);
  w.knots.assign(n_knots, std::vector<double>(cfg.feature_dim));
  for (auto& k : w.knots) {
    for (double& v : k) v = rng.normal();
  }
  return w;
}

/// Catmull-Rom interpolation through the knots, sampled at `frames` points.
void render_word(const Word& w, std::size_t frames, std::vector<float>& out) {
  const std::size_t K = w.knots.size();
  const std::size_t D = w.knots[0].size();
  for (std::size_t f = 0; f < frames; ++f) {
    const double pos = frames == 1 ? 0.0 : static_cast<double>(f) * static_cast<double>(K - 1) / static_cast<double>(frames - 1);
    const std::size_t seg = std::min(static_cast<std::size_t>(pos), K - 2);
    const double t = pos - static_cast<double>(seg);
    const auto& p0 = w.knots[seg == 0 ? 0 : seg - 1];
    const auto& p1 = w.knots[seg];
    const auto& p2 = w.knots[seg + 1];
    const auto& p3 = w.knots[std::min(seg + 2, K - 1)];
    const double t2 = t * t, t3 = t2 * t;
    for (std::size_t d = 0; d < D; ++d) {
      const double v = 0.5 * (2.0 * p1[d] + (-p0[d] + p2[d]) * t + (2.0 * p0[d] - 5.0 * p1[d] + 4.0 * p2[d] - p3[d]) * t2 +
                              (-p0[d] + 3.0 * p1[d] - 3.0 * p2[d] + p3[d]) * t3);
      out.push_back(static_cast<float>(v));
    }
  }
}

}  // namespace

SynthCorpus generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  Rng word_rng(derive_seed(cfg.seed, 0));
  std::vector<Word> words;
  for (std::size_t i = 0; i < cfg.vocab_size; ++i) words.push_back(make_word(word_rng, cfg));
  const std::size_t n_label_words = cfg.n_labels();

  SynthCorpus out;
  SlotSpec& spec = out.manifest.slots;
  SlotGroup action{"action", {}, false};
  for (std::size_t a = 0; a < cfg.n_actions; ++a) {
    spec.label_names.push_back("action" + std::to_string(a));
    action.labels.push_back(a);
  }
  spec.groups.push_back(action);
  for (std::size_t s = 0; s < cfg.n_slots; ++s) {
    SlotGroup g{"slot" + std::to_string(s), {}, false};
    for (std::size_t v = 0; v < cfg.values_per_slot; ++v) {
      g.labels.push_back(spec.label_names.size());
      spec.label_names.push_back("slot" + std::to_string(s) + "_" + std::to_string(v));
    }
    spec.groups.push_back(g);
  }
  spec.validate();

  Rng rng(derive_seed(cfg.seed, 1));
  const std::size_t D = cfg.feature_dim;
  for (std::size_t c = 0; c < cfg.n_commands(); ++c) {
    // Mixed-radix decode of the command index: action first, then slot values.
    std::vector<std::size_t> labels;
    std::size_t rest = c;
    labels.push_back(rest % cfg.n_actions);
    rest /= cfg.n_actions;
    for (std::size_t s = 0; s < cfg.n_slots; ++s) {
      labels.push_back(cfg.n_actions + s * cfg.values_per_slot + rest % cfg.values_per_slot);
      rest /= cfg.values_per_slot;
    }
    for (std::size_t k = 0; k < cfg.n_per_command; ++k) {
      std::vector<std::size_t> tokens = labels;
      const std::size_t n_fill = cfg.max_fillers > 0 ? rng.index(cfg.max_fillers + 1) : 0;
      for (std::size_t f = 0; f < n_fill; ++f) {
        const std::size_t word = n_label_words + rng.index(cfg.vocab_size - n_label_words);
        tokens.insert(tokens.begin() + static_cast<long>(rng.index(tokens.size() + 1)), word);
      }
      std::vector<float> data;
      auto silence = [&] {
        const std::size_t n = cfg.max_silence_frames > 0 ? rng.index(cfg.max_silence_frames + 1) : 0;
        data.insert(data.end(), n * D, 0.0f);
      };
      silence();
      for (std::size_t w : tokens) {
        const double warp = rng.uniform(0.8, 1.25);
        const auto frames = std::max<std::size_t>(
            2, static_cast<std::size_t>(std::lround(static_cast<double>(words[w].frames) * warp)));
        render_word(words[w], frames, data);
      }
      silence();
      if (cfg.noise_level > 0.0) {
        for (float& v : data) v = static_cast<float>(v + cfg.noise_level * rng.normal());
      }
      const std::size_t T = data.size() / D;
      FeatureSequence fs;
      fs.frames = Tensor<float>({T, D}, std::move(data));
      fs.frame_step = 0.01;

      char id[48];
      std::snprintf(id, sizeof id, "cmd%04zu_%03zu", c, k);
      Utterance u;
      u.id = id;
      u.features = std::string("features/") + id + ".cslf";
      u.speaker = "synth";
      for (std::size_t j : labels) u.labels.push_back(spec.label_names[j]);
      out.manifest.utterances.push_back(std::move(u));
      out.features.push_back(std::move(fs));
      out.command.push_back(c);
    }
  }
  return out;
}

Corpus SynthCorpus::corpus() const {
  Corpus c;
  c.slots = manifest.slots;
  for (std::size_t i = 0; i < manifest.utterances.size(); ++i) {
    c.examples.push_back(Example{manifest.utterances[i].id, features[i], manifest.label_indices(manifest.utterances[i])});
  }
  return c;
}

void write_synthetic(const std::filesystem::path& dir, const SynthCorpus& corpus) {
  std::filesystem::create_directories(dir / "features");
  for (std::size_t i = 0; i < corpus.features.size(); ++i) {
    write_feature_file(dir / corpus.manifest.utterances[i].features, corpus.features[i]);
  }
  write_manifest(dir / "manifest.jsonl", corpus.manifest);
}

}  // namespace capslu
