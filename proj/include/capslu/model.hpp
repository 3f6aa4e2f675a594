#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "capslu/autodiff.hpp"
#include "capslu/params.hpp"
#include "capslu/tensor.hpp"

namespace capslu {

enum class ModelKind { capsule, baseline };

std::string to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& s);

struct ModelConfig {
  std::size_t input_dim = 123;
  std::size_t encoder_layers = 2;
  std::size_t encoder_units = 256;  ///< per direction
  std::size_t n_hidden_caps = 32;
  std::size_t hidden_cap_dim = 64;
  std::size_t output_cap_dim = 8;
  std::size_t n_labels = 30;
  std::size_t routing_iters = 3;
  std::size_t baseline_hidden = 1024;

  void validate() const;
  std::size_t encoded_dim() const { return 2 * encoder_units; }

  bool operator==(const ModelConfig&) const = default;
};

std::size_t encoder_param_count(const ModelConfig& cfg);
/// Scalar learnables of the capsule model, including the initial routing logits.
std::size_t count_params(const ModelConfig& cfg);
std::size_t baseline_count_params(const ModelConfig& cfg);
std::size_t count_params(ModelKind kind, const ModelConfig& cfg);

/// Glorot-uniform weights (per gate for the GRU blocks), zero biases, zero
/// initial routing logits. Draws come from one stream in parameter order.
template <typename T>
ParamSet<T> init_params(ModelKind kind, const ModelConfig& cfg, std::uint64_t seed);

/// Padding mask [B, T]: 1 for t < lengths[b], else 0.
template <typename T>
Tensor<T> time_mask(std::span<const std::size_t> lengths, std::size_t steps);

std::vector<std::size_t> subsampled_lengths(std::span<const std::size_t> lengths, std::size_t stride);

template <typename T>
struct Encoded {
  ad::Var<T> H;                      ///< [B, T', 2U]
  std::vector<std::size_t> lengths;  ///< valid frames per row of H
};

/// Stacked bidirectional GRU with stride-2 subsampling between consecutive layers.
template <typename T>
Encoded<T> encode(const BoundParams<T>& p, const ModelConfig& cfg, ad::Var<T> x, std::span<const std::size_t> lengths);

/// alpha_t = sigmoid(w_a . h_t + b_a), zeroed on padded frames. [B, T].
template <typename T>
ad::Var<T> attention(ad::Var<T> H, ad::Var<T> w_a, ad::Var<T> b_a, const Tensor<T>& mask);

/// delta_t = softmax(W_d h_t + b_d). [B, T, R].
template <typename T>
ad::Var<T> distribute(ad::Var<T> H, ad::Var<T> W_d, ad::Var<T> b_d);

/// q_i = sum_t alpha_t delta_ti h_t. [B, R, D].
template <typename T>
ad::Var<T> context(ad::Var<T> H, ad::Var<T> alpha, ad::Var<T> delta);

/// s_i = squash(W_s q_i) with a shared, bias-free W_s. [B, R, hidden_cap_dim].
template <typename T>
ad::Var<T> squash_layer(ad::Var<T> Q, ad::Var<T> W_s);

/// p_ij = W_ij s_i. W_p is [R, hidden_cap_dim, L * output_cap_dim]; result is [B, R, L, output_cap_dim].
template <typename T>
ad::Var<T> predict(ad::Var<T> S, ad::Var<T> W_p, std::size_t n_labels);

template <typename T>
struct RoutingResult {
  ad::Var<T> O;  ///< [B, L, output_cap_dim]
  ad::Var<T> C;  ///< [B, R, L] coupling coefficients of the last iteration
};

/// Routing by agreement, unrolled for `iters` iterations:
///   c_i = softmax_j(b_i); o_j = squash(sum_i c_ij p_ij); b_ij += p_ij . o_j
/// starting from the learnable logits B_init [R, L].
template <typename T>
RoutingResult<T> dynamic_routing(ad::Var<T> P, ad::Var<T> B_init, std::size_t iters);

/// l_j = |o_j|. [B, L].
template <typename T>
ad::Var<T> label_probs(ad::Var<T> O);

/// Per-utterance margin loss [B]: sum_j t_j max(0, 0.9 - l_j) + (1 - t_j) max(0, l_j - 0.1).
template <typename T>
ad::Var<T> margin_loss(ad::Var<T> l, const Tensor<T>& targets);

template <typename T>
struct CapsuleTrace {
  ad::Var<T> H, alpha, delta, Q, S, P, C, O, l;
  std::vector<std::size_t> lengths;  ///< encoded lengths
};

template <typename T>
CapsuleTrace<T> capsule_forward(const BoundParams<T>& p, const ModelConfig& cfg, ad::Var<T> x,
                                std::span<const std::size_t> lengths);

/// Encoder, masked max-pool over time, ReLU hidden layer, sigmoid outputs. [B, L].
template <typename T>
ad::Var<T> baseline_forward(const BoundParams<T>& p, const ModelConfig& cfg, ad::Var<T> x,
                            std::span<const std::size_t> lengths);

/// Per-utterance mean binary cross-entropy [B], with l clamped to [1e-7, 1 - 1e-7].
template <typename T>
ad::Var<T> baseline_loss(ad::Var<T> l, const Tensor<T>& targets);

/// Label probabilities [B, L] from either model.
template <typename T>
ad::Var<T> forward_probs(ModelKind kind, const BoundParams<T>& p, const ModelConfig& cfg, ad::Var<T> x,
                         std::span<const std::size_t> lengths);

/// Per-utterance training loss [B] matching the model kind.
template <typename T>
ad::Var<T> model_loss(ModelKind kind, ad::Var<T> l, const Tensor<T>& targets);

/// Values of every intermediate for a single utterance.
struct ForwardTrace {
  Tensor<float> H, alpha, delta, Q, S, P, C, O, l;
};

/// Runs the capsule model on one [T, input_dim] feature matrix.
ForwardTrace trace_capsule(const ModelConfig& cfg, ParamSet<float>& params, const Tensor<float>& frames);

}  // namespace capslu
