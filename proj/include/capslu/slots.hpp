#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace capslu {

/// Labels of which at most one applies to an utterance (action, object, ...).
struct SlotGroup {
  std::string name;
  std::vector<std::size_t> labels;
  bool optional = false;
};

/// Label vocabulary partitioned into slot groups.
struct SlotSpec {
  std::vector<std::string> label_names;
  std::vector<SlotGroup> groups;

  std::size_t n_labels() const { return label_names.size(); }
  std::optional<std::size_t> label_index(const std::string& name) const;
  /// Throws unless the groups are non-empty and partition [0, n_labels).
  void validate() const;
};

/// Per mandatory group the highest-probability label; per optional group the
/// highest label only when it exceeds 0.5. Ties go to the lowest label index.
/// Returns the chosen label indices in ascending order.
template <typename T>
std::vector<std::size_t> decode(std::span<const T> probs, const SlotSpec& spec) {
  if (probs.size() != spec.n_labels()) throw std::invalid_argument("decode: probability vector has wrong length");
  std::vector<std::size_t> out;
  for (const SlotGroup& g : spec.groups) {
    if (g.labels.empty()) throw std::invalid_argument("decode: empty slot group " + g.name);
    std::size_t best = g.labels.front();
    for (std::size_t j : g.labels) {
      if (probs[j] > probs[best] || (probs[j] == probs[best] && j < best)) best = j;
    }
    if (!g.optional || probs[best] > T(0.5)) out.push_back(best);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace capslu
