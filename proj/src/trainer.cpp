#include "capslu/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "capslu/rng.hpp"

namespace capslu {

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (learning_rate < 0.0) throw std::invalid_argument("learning_rate must be nonnegative");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw std::invalid_argument("Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw std::invalid_argument("adam_eps must be positive");
}

template <typename T>
void adam_step(ParamSet<T>& params, AdamState<T>& state, const TrainConfig& cfg) {
  auto& entries = params.entries();
  if (state.m.empty()) {
    for (const auto& e : entries) {
      state.m.emplace_back(e.param.value.shape());
      state.v.emplace_back(e.param.value.shape());
    }
  }
  if (state.m.size() != entries.size()) throw ShapeError("Adam state does not match the parameter set");
  ++state.step;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < entries.size(); ++k) {
    Parameter<T>& p = entries[k].param;
    Tensor<T>& m = state.m[k];
    Tensor<T>& v = state.v[k];
    if (p.grad.size() != p.value.size() || m.size() != p.value.size()) {
      throw ShapeError("Adam: gradient or state shape mismatch for " + entries[k].name);
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      const double mi = b1 * m[i] + (1.0 - b1) * g;
      const double vi = b2 * v[i] + (1.0 - b2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / c1;
      const double vhat = vi / c2;
      p.value[i] = static_cast<T>(p.value[i] - cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps));
    }
  }
}

template void adam_step(ParamSet<float>&, AdamState<float>&, const TrainConfig&);
template void adam_step(ParamSet<double>&, AdamState<double>&, const TrainConfig&);

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, bool shuffle,
                                                    std::uint64_t seed, std::size_t epoch) {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    Rng rng(derive_seed(seed, 1000 + epoch));
    rng.shuffle(std::span<std::size_t>(order));
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += batch_size) {
    batches.emplace_back(order.begin() + static_cast<long>(i),
                         order.begin() + static_cast<long>(std::min(n, i + batch_size)));
  }
  return batches;
}

PaddedBatch make_batch(std::span<const Example> examples, std::span<const std::size_t> indices, std::size_t n_labels,
                       std::size_t extra_padding) {
  if (indices.empty()) throw std::invalid_argument("empty batch");
  const std::size_t D = examples[indices[0]].features.dim();
  std::size_t tmax = 0;
  for (std::size_t i : indices) {
    const FeatureSequence& f = examples[i].features;
    if (f.dim() != D) throw ShapeError("examples in a batch have different feature dimensions");
    tmax = std::max(tmax, f.length());
  }
  tmax += extra_padding;
  const std::size_t B = indices.size();
  PaddedBatch pb;
  pb.features = Tensor<float>({B, tmax, D});
  pb.targets = Tensor<float>({B, n_labels});
  pb.indices.assign(indices.begin(), indices.end());
  for (std::size_t b = 0; b < B; ++b) {
    const Example& ex = examples[indices[b]];
    const auto& src = ex.features.frames.data();
    std::copy(src.begin(), src.end(), pb.features.data().begin() + static_cast<long>(b * tmax * D));
    pb.lengths.push_back(ex.features.length());
    const std::vector<float> t = target_vector(ex.labels, n_labels);
    std::copy(t.begin(), t.end(), pb.targets.data().begin() + static_cast<long>(b * n_labels));
  }
  return pb;
}

std::vector<PaddedBatch> make_batches(std::span<const Example> examples, std::size_t n_labels, const TrainConfig& cfg,
                                      std::size_t epoch) {
  std::vector<PaddedBatch> out;
  for (const auto& idx : batch_indices(examples.size(), cfg.batch_size, cfg.shuffle, cfg.seed, epoch)) {
    out.push_back(make_batch(examples, idx, n_labels));
  }
  return out;
}

namespace {

std::vector<Example> normalized_copy(std::span<const Example> examples, const NormStats& norm) {
  std::vector<Example> out;
  out.reserve(examples.size());
  for (const Example& ex : examples) {
    out.push_back(Example{ex.id, normalize(ex.features, norm), ex.labels});
  }
  return out;
}

}  // namespace

TrainResult train(ModelKind kind, const ModelConfig& model_cfg, std::span<const Example> examples,
                  const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  model_cfg.validate();
  if (examples.empty()) throw std::invalid_argument("cannot train on an empty dataset");
  for (const Example& ex : examples) {
    if (ex.features.dim() != model_cfg.input_dim) {
      throw ShapeError("example " + ex.id + " has feature dimension " + std::to_string(ex.features.dim()) +
                       ", model expects " + std::to_string(model_cfg.input_dim));
    }
  }
  std::vector<FeatureSequence> feats;
  feats.reserve(examples.size());
  for (const Example& ex : examples) feats.push_back(ex.features);

  TrainResult result;
  Checkpoint& ck = result.checkpoint;
  ck.kind = kind;
  ck.config = model_cfg;
  ck.norm = compute_norm_stats(feats);
  ck.params = init_params<float>(kind, model_cfg, derive_seed(cfg.seed, 1));
  const std::vector<Example> data = normalized_copy(examples, ck.norm);

  AdamState<float> adam;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    for (const auto& idx : batch_indices(data.size(), cfg.batch_size, cfg.shuffle, cfg.seed, epoch)) {
      const PaddedBatch batch = make_batch(data, idx, model_cfg.n_labels);
      ck.params.zero_grad();
      ad::Tape<float> tape;
      BoundParams<float> bound(tape, ck.params);
      ad::Var<float> x = tape.constant(batch.features);
      ad::Var<float> probs = forward_probs(kind, bound, model_cfg, x, batch.lengths);
      ad::Var<float> per_utt = model_loss(kind, probs, batch.targets);
      for (float v : per_utt.value().data()) total += v;
      tape.backward(ad::mean_all(per_utt));
      adam_step(ck.params, adam, cfg);
    }
    const double mean = total / static_cast<double>(data.size());
    result.epoch_loss.push_back(mean);
    if (on_epoch) on_epoch(epoch + 1, mean);
  }
  return result;
}

std::vector<std::vector<float>> predict_probs(Checkpoint& ckpt, std::span<const Example> examples,
                                              std::size_t batch_size) {
  const std::vector<Example> data = normalized_copy(examples, ckpt.norm);
  const std::size_t L = ckpt.config.n_labels;
  std::vector<std::vector<float>> out(data.size());
  for (const auto& idx : batch_indices(data.size(), batch_size, false, 0, 0)) {
    const PaddedBatch batch = make_batch(data, idx, L);
    ad::Tape<float> tape;
    BoundParams<float> bound(tape, ckpt.params, /*trainable=*/false);
    ad::Var<float> probs = forward_probs(ckpt.kind, bound, ckpt.config, tape.constant(batch.features), batch.lengths);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto row = probs.value().data().subspan(b * L, L);
      out[idx[b]].assign(row.begin(), row.end());
    }
  }
  return out;
}

std::vector<double> batch_losses(Checkpoint& ckpt, const PaddedBatch& batch) {
  PaddedBatch nb = batch;
  const std::size_t B = batch.lengths.size(), Tm = batch.features.dim(1), D = batch.features.dim(2);
  if (ckpt.norm.dim() != D) throw ShapeError("normalization stats do not match batch features");
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < batch.lengths[b]; ++t) {
      for (std::size_t d = 0; d < D; ++d) {
        float& v = nb.features[(b * Tm + t) * D + d];
        v = static_cast<float>((v - ckpt.norm.mean[d]) / std::max<double>(ckpt.norm.stddev[d], kStdFloor));
      }
    }
  }
  ad::Tape<float> tape;
  BoundParams<float> bound(tape, ckpt.params, false);
  ad::Var<float> probs = forward_probs(ckpt.kind, bound, ckpt.config, tape.constant(nb.features), nb.lengths);
  ad::Var<float> per_utt = model_loss(ckpt.kind, probs, nb.targets);
  return std::vector<double>(per_utt.value().data().begin(), per_utt.value().data().end());
}

double evaluate(Checkpoint& ckpt, std::span<const Example> examples, const SlotSpec& slots) {
  if (examples.empty()) throw std::invalid_argument("cannot evaluate on an empty test set");
  if (slots.n_labels() != ckpt.config.n_labels) throw std::invalid_argument("slot spec does not match model labels");
  const auto probs = predict_probs(ckpt, examples);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (decode<float>(probs[i], slots) == examples[i].labels) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

std::string loss_history_csv(std::span<const double> epoch_loss) {
  std::ostringstream os;
  os.precision(9);
  os << "epoch,mean_loss\n";
  for (std::size_t i = 0; i < epoch_loss.size(); ++i) os << (i + 1) << ',' << epoch_loss[i] << '\n';
  return os.str();
}

}  // namespace capslu
