#include "capslu/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace capslu {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& v) { return static_cast<std::size_t>(parse_u64(key, v)); }

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string show(double v) {
  char buf[40];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string show(bool v) { return v ? "true" : "false"; }

template <typename T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

struct Key {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define CAPSLU_SIZE_KEY(NAME, FIELD)                                                       \
  Key {                                                                                    \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = parse_size(NAME, v); },       \
        [](const RunConfig& c) { return std::to_string(c.FIELD); }                         \
  }
#define CAPSLU_DOUBLE_KEY(NAME, FIELD)                                                     \
  Key {                                                                                    \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = parse_double(NAME, v); },     \
        [](const RunConfig& c) { return show(static_cast<double>(c.FIELD)); }              \
  }
#define CAPSLU_BOOL_KEY(NAME, FIELD)                                                       \
  Key {                                                                                    \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = parse_bool(NAME, v); },       \
        [](const RunConfig& c) { return show(c.FIELD); }                                   \
  }

const std::vector<Key>& registry() {
  static const std::vector<Key> keys = {
      Key{"seed", [](RunConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); },
          [](const RunConfig& c) { return std::to_string(c.seed); }},
      CAPSLU_SIZE_KEY("features.n_mels", features.n_mels),
      CAPSLU_DOUBLE_KEY("features.window_len", features.window_len),
      CAPSLU_DOUBLE_KEY("features.window_step", features.window_step),
      CAPSLU_SIZE_KEY("features.delta_window", features.delta_window),
      CAPSLU_BOOL_KEY("features.apply_vad", features.apply_vad),
      CAPSLU_DOUBLE_KEY("features.vad_threshold", features.vad_threshold),
      CAPSLU_DOUBLE_KEY("features.vad_min_silence", features.vad_min_silence),
      CAPSLU_SIZE_KEY("model.input_dim", model.input_dim),
      CAPSLU_SIZE_KEY("model.encoder_layers", model.encoder_layers),
      CAPSLU_SIZE_KEY("model.encoder_units", model.encoder_units),
      CAPSLU_SIZE_KEY("model.n_hidden_caps", model.n_hidden_caps),
      CAPSLU_SIZE_KEY("model.hidden_cap_dim", model.hidden_cap_dim),
      CAPSLU_SIZE_KEY("model.output_cap_dim", model.output_cap_dim),
      CAPSLU_SIZE_KEY("model.n_labels", model.n_labels),
      CAPSLU_SIZE_KEY("model.routing_iters", model.routing_iters),
      CAPSLU_SIZE_KEY("model.baseline_hidden", model.baseline_hidden),
      CAPSLU_SIZE_KEY("train.batch_size", train.batch_size),
      CAPSLU_SIZE_KEY("train.epochs", train.epochs),
      CAPSLU_DOUBLE_KEY("train.learning_rate", train.learning_rate),
      CAPSLU_DOUBLE_KEY("train.adam_beta1", train.adam_beta1),
      CAPSLU_DOUBLE_KEY("train.adam_beta2", train.adam_beta2),
      CAPSLU_DOUBLE_KEY("train.adam_eps", train.adam_eps),
      CAPSLU_BOOL_KEY("train.shuffle", train.shuffle),
      CAPSLU_SIZE_KEY("experiment.n_blocks", experiment.n_blocks),
      CAPSLU_SIZE_KEY("experiment.repeats", experiment.repeats),
      Key{"experiment.objective",
          [](RunConfig& c, const std::string& v) {
            try {
              c.experiment.objective = parse_split_objective(v);
            } catch (const std::invalid_argument& e) {
              throw ConfigError(std::string("experiment.objective: ") + e.what());
            }
          },
          [](const RunConfig& c) { return to_string(c.experiment.objective); }},
      CAPSLU_DOUBLE_KEY("experiment.lowess_frac", experiment.lowess_frac),
      CAPSLU_SIZE_KEY("experiment.lowess_iters", experiment.lowess_iters),
      Key{"experiment.models",
          [](RunConfig& c, const std::string& v) {
            c.experiment.models = split_list(v);
            for (const auto& m : c.experiment.models) {
              try {
                parse_model_kind(m);
              } catch (const std::invalid_argument& e) {
                throw ConfigError(std::string("experiment.models: ") + e.what());
              }
            }
          },
          [](const RunConfig& c) { return join(c.experiment.models); }},
      Key{"experiment.train_blocks",
          [](RunConfig& c, const std::string& v) {
            c.experiment.train_blocks.clear();
            for (const auto& s : split_list(v)) c.experiment.train_blocks.push_back(parse_size("experiment.train_blocks", s));
          },
          [](const RunConfig& c) { return join(c.experiment.train_blocks); }},
      CAPSLU_SIZE_KEY("synth.vocab_size", synth.vocab_size),
      CAPSLU_SIZE_KEY("synth.n_actions", synth.n_actions),
      CAPSLU_SIZE_KEY("synth.n_slots", synth.n_slots),
      CAPSLU_SIZE_KEY("synth.values_per_slot", synth.values_per_slot),
      CAPSLU_SIZE_KEY("synth.n_per_command", synth.n_per_command),
      CAPSLU_DOUBLE_KEY("synth.noise_level", synth.noise_level),
      CAPSLU_SIZE_KEY("synth.feature_dim", synth.feature_dim),
      CAPSLU_SIZE_KEY("synth.min_word_frames", synth.min_word_frames),
      CAPSLU_SIZE_KEY("synth.max_word_frames", synth.max_word_frames),
      CAPSLU_SIZE_KEY("synth.max_fillers", synth.max_fillers),
      CAPSLU_SIZE_KEY("synth.max_silence_frames", synth.max_silence_frames),
  };
  return keys;
}

#undef CAPSLU_SIZE_KEY
#undef CAPSLU_DOUBLE_KEY
#undef CAPSLU_BOOL_KEY

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const Key& k : registry()) {
    if (k.name == key) {
      k.set(*this, trim(value));
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void RunConfig::validate() const {
  try {
    features.validate();
    model.validate();
    train.validate();
    synth.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (experiment.n_blocks < 2) throw ConfigError("experiment.n_blocks must be >= 2");
  if (experiment.repeats < 1) throw ConfigError("experiment.repeats must be >= 1");
  if (!(experiment.lowess_frac > 0.0 && experiment.lowess_frac <= 1.0)) {
    throw ConfigError("experiment.lowess_frac must lie in (0, 1]");
  }
  for (std::size_t k : experiment.train_blocks) {
    if (k < 1 || k >= experiment.n_blocks) throw ConfigError("experiment.train_blocks entries must lie in [1, n_blocks)");
  }
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  std::string section;
  for (const Key& k : registry()) {
    const auto dot = k.name.find('.');
    if (dot == std::string::npos) {
      os << k.name << " = " << k.get(*this) << '\n';
      continue;
    }
    const std::string sec = k.name.substr(0, dot);
    if (sec != section) {
      os << "\n[" << sec << "]\n";
      section = sec;
    }
    os << k.name.substr(dot + 1) << " = " << k.get(*this) << '\n';
  }
  return os.str();
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const Key& k : registry()) out.push_back(k.name);
  return out;
}

RunConfig parse_config(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    try {
      base.set(section.empty() ? key : section + "." + key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str(), std::move(base));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace capslu
