#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "capslu/autodiff.hpp"
#include "capslu/tensor.hpp"

namespace capslu {

/// Named parameters in a fixed insertion order (checkpoints and optimizer
/// state iterate in this order).
template <typename T>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Parameter<T> param;
  };

  Parameter<T>& add(std::string name, Tensor<T> value) {
    if (index_.contains(name)) throw std::invalid_argument("duplicate parameter " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back(Entry{std::move(name), Parameter<T>(std::move(value))});
    return entries_.back().param;
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  Parameter<T>& at(const std::string& name) { return entries_[lookup(name)].param; }
  const Parameter<T>& at(const std::string& name) const { return entries_[lookup(name)].param; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const Entry& e : entries_) n += e.param.value.size();
    return n;
  }

  void zero_grad() {
    for (Entry& e : entries_) e.param.zero_grad();
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const Entry& e : entries_) out.add(e.name, e.param.value.template cast<U>());
    return out;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return it->second;
  }

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Parameters bound as leaves of one tape.
template <typename T>
class BoundParams {
 public:
  /// With `trainable` false the values are recorded as constants (inference).
  BoundParams(ad::Tape<T>& tape, ParamSet<T>& params, bool trainable = true) {
    for (auto& e : params.entries()) {
      vars_.emplace(e.name, trainable ? tape.parameter(e.param) : tape.constant(e.param.value));
    }
  }

  ad::Var<T> operator()(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw std::out_of_range("parameter " + name + " is not bound");
    return it->second;
  }

 private:
  std::unordered_map<std::string, ad::Var<T>> vars_;
};

}  // namespace capslu
