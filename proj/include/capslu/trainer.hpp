#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "capslu/checkpoint.hpp"
#include "capslu/dataset.hpp"
#include "capslu/model.hpp"
#include "capslu/params.hpp"

namespace capslu {

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t epochs = 30;
  double learning_rate = 0.001;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  bool shuffle = true;

  void validate() const;
};

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::size_t step = 0;
};

/// One bias-corrected Adam update of every parameter from its accumulated grad.
template <typename T>
void adam_step(ParamSet<T>& params, AdamState<T>& state, const TrainConfig& cfg);

/// Zero-padded minibatch. Frames past lengths[b] are zero.
struct PaddedBatch {
  Tensor<float> features;  ///< [B, T_max, D]
  std::vector<std::size_t> lengths;
  Tensor<float> targets;  ///< [B, L]
  std::vector<std::size_t> indices;  ///< positions in the source example list
};

/// Example positions grouped into batches; shuffled deterministically from
/// (seed, epoch) when `shuffle` is set. The final partial batch is kept.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, bool shuffle,
                                                    std::uint64_t seed, std::size_t epoch);

/// Pads the selected examples to a common length plus `extra_padding` frames.
PaddedBatch make_batch(std::span<const Example> examples, std::span<const std::size_t> indices, std::size_t n_labels,
                       std::size_t extra_padding = 0);

std::vector<PaddedBatch> make_batches(std::span<const Example> examples, std::size_t n_labels, const TrainConfig& cfg,
                                      std::size_t epoch);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> epoch_loss;  ///< mean per-utterance loss of each epoch
};

using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

/// Fits normalization statistics on `examples`, initializes parameters from
/// the seed and runs epochs x batches of forward, loss, backward, Adam.
TrainResult train(ModelKind kind, const ModelConfig& model_cfg, std::span<const Example> examples,
                  const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Label probabilities for each example, [n][L], in input order.
std::vector<std::vector<float>> predict_probs(Checkpoint& ckpt, std::span<const Example> examples,
                                              std::size_t batch_size = 16);

/// Per-utterance loss of a padded batch under a checkpoint (features are normalized first).
std::vector<double> batch_losses(Checkpoint& ckpt, const PaddedBatch& batch);

/// Fraction of examples whose decoded label set equals the reference exactly.
double evaluate(Checkpoint& ckpt, std::span<const Example> examples, const SlotSpec& slots);

/// Loss history as "epoch,mean_loss" lines.
std::string loss_history_csv(std::span<const double> epoch_loss);

}  // namespace capslu
