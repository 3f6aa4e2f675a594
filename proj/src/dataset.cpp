#include "capslu/dataset.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace capslu {

using nlohmann::json;

std::optional<std::size_t> SlotSpec::label_index(const std::string& name) const {
  for (std::size_t i = 0; i < label_names.size(); ++i) {
    if (label_names[i] == name) return i;
  }
  return std::nullopt;
}

void SlotSpec::validate() const {
  if (label_names.size() < 2) throw std::invalid_argument("slot spec needs at least two labels");
  std::vector<int> owner(label_names.size(), -1);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].labels.empty()) throw std::invalid_argument("empty slot group " + groups[g].name);
    for (std::size_t j : groups[g].labels) {
      if (j >= label_names.size()) throw std::invalid_argument("slot group " + groups[g].name + " references unknown label");
      if (owner[j] != -1) throw std::invalid_argument("label " + label_names[j] + " belongs to two slot groups");
      owner[j] = static_cast<int>(g);
    }
  }
  for (std::size_t j = 0; j < owner.size(); ++j) {
    if (owner[j] == -1) throw std::invalid_argument("label " + label_names[j] + " is not in any slot group");
  }
}

std::vector<std::size_t> DatasetManifest::label_indices(const Utterance& u) const {
  std::vector<std::size_t> idx;
  std::vector<bool> group_used(slots.groups.size(), false);
  for (const std::string& name : u.labels) {
    auto j = slots.label_index(name);
    if (!j) throw std::invalid_argument("utterance " + u.id + ": unknown label " + name);
    for (std::size_t g = 0; g < slots.groups.size(); ++g) {
      const auto& ls = slots.groups[g].labels;
      if (std::find(ls.begin(), ls.end(), *j) != ls.end()) {
        if (group_used[g]) throw std::invalid_argument("utterance " + u.id + ": two labels in slot " + slots.groups[g].name);
        group_used[g] = true;
      }
    }
    idx.push_back(*j);
  }
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::filesystem::path DatasetManifest::resolve(const std::string& rel) const {
  std::filesystem::path p(rel);
  return p.is_absolute() ? p : base_dir / p;
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  DatasetManifest m;
  m.base_dir = path.parent_path();
  std::string line;
  bool have_header = false;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!have_header) {
      if (!j.contains("labels") || !j.contains("slots")) {
        throw std::runtime_error(path.string() + ": first line must declare labels and slots");
      }
      m.slots.label_names = j.at("labels").get<std::vector<std::string>>();
      for (const json& g : j.at("slots")) {
        SlotGroup group;
        group.name = g.at("name").get<std::string>();
        group.optional = g.value("optional", false);
        for (const json& name : g.at("labels")) {
          auto idx = m.slots.label_index(name.get<std::string>());
          if (!idx) throw std::runtime_error("slot " + group.name + " references undeclared label " + name.get<std::string>());
          group.labels.push_back(*idx);
        }
        m.slots.groups.push_back(std::move(group));
      }
      m.slots.validate();
      have_header = true;
      continue;
    }
    Utterance u;
    u.id = j.at("id").get<std::string>();
    u.audio = j.value("audio", std::string{});
    u.features = j.value("features", std::string{});
    u.speaker = j.value("speaker", std::string{});
    u.labels = j.at("labels").get<std::vector<std::string>>();
    if (u.audio.empty() && u.features.empty()) {
      throw std::runtime_error("utterance " + u.id + " has neither audio nor features");
    }
    m.label_indices(u);
    m.utterances.push_back(std::move(u));
  }
  if (!have_header) throw std::runtime_error(path.string() + ": empty manifest");
  return m;
}

std::string manifest_text(const DatasetManifest& m) {
  std::ostringstream os;
  json header;
  header["labels"] = m.slots.label_names;
  json groups = json::array();
  for (const SlotGroup& g : m.slots.groups) {
    std::vector<std::string> names;
    for (std::size_t j : g.labels) names.push_back(m.slots.label_names[j]);
    groups.push_back(json{{"name", g.name}, {"labels", names}, {"optional", g.optional}});
  }
  header["slots"] = groups;
  os << header.dump() << '\n';
  for (const Utterance& u : m.utterances) {
    json j;
    j["id"] = u.id;
    if (!u.audio.empty()) j["audio"] = u.audio;
    if (!u.features.empty()) j["features"] = u.features;
    j["speaker"] = u.speaker;
    j["labels"] = u.labels;
    os << j.dump() << '\n';
  }
  return os.str();
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << manifest_text(manifest);
}

Corpus load_corpus(const DatasetManifest& manifest, const FeatureConfig& cfg) {
  Corpus c;
  c.slots = manifest.slots;
  c.examples.reserve(manifest.utterances.size());
  for (const Utterance& u : manifest.utterances) {
    Example ex;
    ex.id = u.id;
    ex.labels = manifest.label_indices(u);
    if (!u.features.empty()) {
      ex.features = read_feature_file(manifest.resolve(u.features));
    } else {
      ex.features = extract_features(load_wav(manifest.resolve(u.audio)), cfg);
    }
    c.examples.push_back(std::move(ex));
  }
  return c;
}

std::vector<float> target_vector(std::span<const std::size_t> labels, std::size_t n_labels) {
  std::vector<float> t(n_labels, 0.0f);
  for (std::size_t j : labels) {
    if (j >= n_labels) throw std::out_of_range("label index out of range");
    t[j] = 1.0f;
  }
  return t;
}

}  // namespace capslu
