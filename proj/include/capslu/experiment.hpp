#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "capslu/dataset.hpp"
#include "capslu/model.hpp"
#include "capslu/trainer.hpp"

namespace capslu {

/// Jensen-Shannon divergence in bits; inputs must each sum to 1 within 1e-6.
double jsd(std::span<const double> p, std::span<const double> q);

/// Normalized label histogram over the label sets of a block's members.
/// A block without any labels gets the uniform distribution.
std::vector<double> label_distribution(std::span<const std::vector<std::size_t>> label_sets,
                                       std::span<const std::size_t> members, std::size_t n_labels);

enum class SplitObjective { mean, max };

std::string to_string(SplitObjective o);
SplitObjective parse_split_objective(const std::string& s);

struct BlockSplit {
  std::vector<std::size_t> block_of;  ///< block index per utterance
  std::size_t n_blocks = 0;
  double initial_objective = 0.0;
  double objective = 0.0;
  std::size_t accepted_swaps = 0;
  std::size_t passes = 0;

  std::vector<std::vector<std::size_t>> members() const;
};

/// Pairwise JSD objective (mean or max over block pairs) of an assignment.
double split_objective(std::span<const std::vector<std::size_t>> label_sets, std::span<const std::size_t> block_of,
                       std::size_t n_blocks, std::size_t n_labels, SplitObjective objective = SplitObjective::mean);

/// Greedy pairwise-swap search from a random balanced partition. A swap is kept
/// only if it strictly lowers the objective; the search ends after a full pass
/// without a kept swap or after 10 * n kept swaps.
BlockSplit split_blocks(std::span<const std::vector<std::size_t>> label_sets, std::size_t n_labels,
                        std::size_t n_blocks, std::uint64_t seed, SplitObjective objective = SplitObjective::mean);

BlockSplit split_blocks(const DatasetManifest& manifest, std::size_t n_blocks, std::uint64_t seed,
                        SplitObjective objective = SplitObjective::mean);

/// Block file: "id,block" per utterance.
std::string blocks_csv(const DatasetManifest& manifest, const BlockSplit& split);
void write_blocks(const std::filesystem::path& path, const DatasetManifest& manifest, const BlockSplit& split);
/// Reads a block file and returns the block index of each manifest utterance.
std::vector<std::size_t> read_blocks(const std::filesystem::path& path, const DatasetManifest& manifest);

struct PlanEntry {
  std::size_t n_train_blocks = 0;
  std::size_t repeat = 0;  ///< 1-based
  std::vector<std::size_t> train_blocks;
  std::vector<std::size_t> test_blocks;
  std::uint64_t seed = 0;
};

using CurvePlan = std::vector<PlanEntry>;

/// For each k in `ks` (default 1 .. n_blocks-1), `repeats` random k-subsets of
/// blocks as training data; distinct across repeats while unused subsets remain.
CurvePlan make_curve_plan(std::size_t n_blocks, std::size_t repeats, std::uint64_t seed,
                          std::span<const std::size_t> ks = {});

struct CurvePoint {
  std::string model;
  std::size_t n_train_blocks = 0;
  std::size_t repeat = 0;
  std::size_t n_examples = 0;
  double accuracy = 0.0;
  bool ok = true;
  std::string error;
};

/// Trains on `train` and returns accuracy on `test`.
using CurveRunner = std::function<double(std::span<const Example> train, std::span<const Example> test,
                                         std::uint64_t seed)>;

CurveRunner model_runner(ModelKind kind, const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                         const SlotSpec& slots);

/// Runs every plan entry (in parallel over `jobs` threads). Results keep plan
/// order; a failing entry is recorded with ok = false instead of aborting.
std::vector<CurvePoint> run_curve(std::span<const Example> examples, std::span<const std::size_t> block_of,
                                  const CurvePlan& plan, const std::string& model, const CurveRunner& runner,
                                  std::size_t jobs = 1);

struct Point {
  double x = 0.0;
  double y = 0.0;
};

/// Locally weighted linear regression with tricube weights over the nearest
/// ceil(frac * n) points and `iters` bisquare robustness passes. Returns the
/// fitted value at every input point, sorted by (x, y).
std::vector<Point> lowess(std::span<const Point> points, double frac = 0.5, std::size_t iters = 2);

struct SmoothedPoint {
  std::string model;
  double n_examples = 0.0;
  double accuracy = 0.0;
};

/// LOWESS of each model's successful points, one row per distinct x.
std::vector<SmoothedPoint> smooth_curve(std::span<const CurvePoint> points, double frac = 0.5,
                                        std::size_t iters = 2);

std::string curve_csv(std::span<const CurvePoint> points);
std::string smoothed_csv(std::span<const SmoothedPoint> points);
std::string curve_svg(std::span<const CurvePoint> points, std::span<const SmoothedPoint> smoothed);

}  // namespace capslu
