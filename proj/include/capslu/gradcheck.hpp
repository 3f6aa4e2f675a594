#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "capslu/autodiff.hpp"
#include "capslu/model.hpp"
#include "capslu/params.hpp"

namespace capslu::gradcheck {

/// Builds a differentiable quantity of any shape from bound parameters.
using Function = std::function<ad::Var<double>(ad::Tape<double>&, const BoundParams<double>&)>;

struct Settings {
  double step = 1e-5;        ///< central difference half-width
  double floor = 1e-5;       ///< denominator floor of the relative error
  std::uint64_t projection_seed = 0;
};

/// Reduces f to a scalar through a fixed random projection, then compares the
/// reverse-mode gradient with central differences for every parameter entry.
/// Returns max |a - n| / max(|a|, |n|, floor).
double max_relative_error(ParamSet<double>& params, const Function& f, const Settings& settings = {});

/// Small model configuration used by the whole-model cases.
ModelConfig tiny_model();

struct Options {
  std::size_t seeds = 20;
  std::uint64_t root_seed = 0;
  double tolerance = 1e-4;
  Settings settings;
  /// Model configuration for the whole-model cases; kept tiny by default.
  ModelConfig model = tiny_model();
  /// Name of a case whose backward pass is deliberately corrupted.
  std::string corrupt;
  /// Restricts the run to these cases when non-empty.
  std::vector<std::string> only;
};

struct CaseResult {
  std::string name;
  std::size_t trials = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

std::vector<std::string> case_names();
std::vector<CaseResult> run(const Options& options);

/// Identity in the forward pass; multiplies the incoming gradient by 1.5.
ad::Var<double> corrupt_backward(ad::Var<double> x);

/// One line per case: name, trials, max relative error, PASS/FAIL.
std::string format_report(std::span<const CaseResult> results, double tolerance);

}  // namespace capslu::gradcheck
