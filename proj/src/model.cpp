#include "capslu/model.hpp"

#include <array>
#include <cmath>
#include <stdexcept>

#include "capslu/gru.hpp"
#include "capslu/rng.hpp"

namespace capslu {

namespace {

std::string gru_name(std::size_t layer, bool reverse, const char* what) {
  return "encoder.l" + std::to_string(layer) + (reverse ? ".bwd." : ".fwd.") + what;
}

std::size_t layer_input_dim(const ModelConfig& cfg, std::size_t layer) {
  return layer == 0 ? cfg.input_dim : cfg.encoded_dim();
}

template <typename T>
Tensor<T> glorot(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

double glorot_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

}  // namespace

std::string to_string(ModelKind kind) { return kind == ModelKind::capsule ? "capsule" : "baseline"; }

ModelKind parse_model_kind(const std::string& s) {
  if (s == "capsule") return ModelKind::capsule;
  if (s == "baseline" || s == "encdec") return ModelKind::baseline;
  throw std::invalid_argument("unknown model kind '" + s + "' (expected capsule or baseline)");
}

void ModelConfig::validate() const {
  const std::array<std::size_t, 9> all{input_dim,     encoder_layers, encoder_units, n_hidden_caps,  hidden_cap_dim,
                                       output_cap_dim, n_labels,      routing_iters, baseline_hidden};
  for (std::size_t v : all) {
    if (v == 0) throw std::invalid_argument("model configuration values must be positive");
  }
  if (n_labels < 2) throw std::invalid_argument("n_labels must be >= 2");
}

std::size_t encoder_param_count(const ModelConfig& cfg) {
  const std::size_t U = cfg.encoder_units;
  std::size_t n = 0;
  for (std::size_t l = 0; l < cfg.encoder_layers; ++l) {
    n += 2 * 3 * (layer_input_dim(cfg, l) * U + U * U + U);
  }
  return n;
}

std::size_t count_params(const ModelConfig& cfg) {
  const std::size_t D = cfg.encoded_dim(), R = cfg.n_hidden_caps, L = cfg.n_labels;
  return encoder_param_count(cfg) + (D + 1) + (D * R + R) + D * cfg.hidden_cap_dim +
         R * L * cfg.hidden_cap_dim * cfg.output_cap_dim + R * L;
}

std::size_t baseline_count_params(const ModelConfig& cfg) {
  const std::size_t D = cfg.encoded_dim(), Hd = cfg.baseline_hidden, L = cfg.n_labels;
  return encoder_param_count(cfg) + (D * Hd + Hd) + (Hd * L + L);
}

std::size_t count_params(ModelKind kind, const ModelConfig& cfg) {
  return kind == ModelKind::capsule ? count_params(cfg) : baseline_count_params(cfg);
}

template <typename T>
ParamSet<T> init_params(ModelKind kind, const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParamSet<T> ps;
  const std::size_t U = cfg.encoder_units, D = cfg.encoded_dim();
  for (std::size_t l = 0; l < cfg.encoder_layers; ++l) {
    const std::size_t in = layer_input_dim(cfg, l);
    for (bool rev : {false, true}) {
      ps.add(gru_name(l, rev, "W_x"), glorot<T>({in, 3 * U}, glorot_bound(in, U), rng));
      ps.add(gru_name(l, rev, "W_h"), glorot<T>({U, 3 * U}, glorot_bound(U, U), rng));
      ps.add(gru_name(l, rev, "b"), Tensor<T>({3 * U}));
    }
  }
  if (kind == ModelKind::capsule) {
    const std::size_t R = cfg.n_hidden_caps, L = cfg.n_labels, Hc = cfg.hidden_cap_dim, Oc = cfg.output_cap_dim;
    ps.add("attention.w", glorot<T>({D, 1}, glorot_bound(D, 1), rng));
    ps.add("attention.b", Tensor<T>({1}));
    ps.add("distributor.W", glorot<T>({D, R}, glorot_bound(D, R), rng));
    ps.add("distributor.b", Tensor<T>({R}));
    ps.add("squash.W", glorot<T>({D, Hc}, glorot_bound(D, Hc), rng));
    ps.add("predict.W", glorot<T>({R, Hc, L * Oc}, glorot_bound(Hc, Oc), rng));
    ps.add("routing.B", Tensor<T>({R, L}));
  } else {
    const std::size_t Hd = cfg.baseline_hidden, L = cfg.n_labels;
    ps.add("hidden.W", glorot<T>({D, Hd}, glorot_bound(D, Hd), rng));
    ps.add("hidden.b", Tensor<T>({Hd}));
    ps.add("output.W", glorot<T>({Hd, L}, glorot_bound(Hd, L), rng));
    ps.add("output.b", Tensor<T>({L}));
  }
  return ps;
}

template <typename T>
Tensor<T> time_mask(std::span<const std::size_t> lengths, std::size_t steps) {
  Tensor<T> m({lengths.size(), steps});
  for (std::size_t b = 0; b < lengths.size(); ++b)
    for (std::size_t t = 0; t < std::min(lengths[b], steps); ++t) m[b * steps + t] = T(1);
  return m;
}

std::vector<std::size_t> subsampled_lengths(std::span<const std::size_t> lengths, std::size_t stride) {
  std::vector<std::size_t> out;
  out.reserve(lengths.size());
  for (std::size_t len : lengths) out.push_back((len + stride - 1) / stride);
  return out;
}

template <typename T>
Encoded<T> encode(const BoundParams<T>& p, const ModelConfig& cfg, ad::Var<T> x,
                  std::span<const std::size_t> lengths) {
  if (x.shape().size() != 3 || x.dim(2) != cfg.input_dim) {
    throw ShapeError("encoder input must be [B,T," + std::to_string(cfg.input_dim) + "], got " + shape_str(x.shape()));
  }
  if (x.dim(1) == 0) throw std::invalid_argument("cannot encode an empty sequence");
  for (std::size_t len : lengths) {
    if (len == 0) throw std::invalid_argument("cannot encode an empty sequence");
  }
  std::vector<std::size_t> lens(lengths.begin(), lengths.end());
  for (std::size_t l = 0; l < cfg.encoder_layers; ++l) {
    if (l > 0) {
      x = ad::subsample(x, 1, 2);
      lens = subsampled_lengths(lens, 2);
    }
    const std::array<ad::Var<T>, 2> dirs{
        ad::gru_layer(x, lens, p(gru_name(l, false, "W_x")), p(gru_name(l, false, "W_h")), p(gru_name(l, false, "b")),
                      ad::Direction::forward),
        ad::gru_layer(x, lens, p(gru_name(l, true, "W_x")), p(gru_name(l, true, "W_h")), p(gru_name(l, true, "b")),
                      ad::Direction::reverse)};
    x = ad::concat<T>(dirs, -1);
  }
  return Encoded<T>{x, std::move(lens)};
}

template <typename T>
ad::Var<T> attention(ad::Var<T> H, ad::Var<T> w_a, ad::Var<T> b_a, const Tensor<T>& mask) {
  const std::size_t B = H.dim(0), Tn = H.dim(1), D = H.dim(2);
  ad::Var<T> logits = ad::reshape(ad::matmul(ad::reshape(H, {B * Tn, D}), w_a), {B, Tn});
  return ad::mul_const(ad::sigmoid(ad::add(logits, b_a)), mask);
}

template <typename T>
ad::Var<T> distribute(ad::Var<T> H, ad::Var<T> W_d, ad::Var<T> b_d) {
  const std::size_t B = H.dim(0), Tn = H.dim(1), D = H.dim(2), R = W_d.dim(1);
  ad::Var<T> logits = ad::add(ad::matmul(ad::reshape(H, {B * Tn, D}), W_d), b_d);
  return ad::softmax(ad::reshape(logits, {B, Tn, R}), -1);
}

template <typename T>
ad::Var<T> context(ad::Var<T> H, ad::Var<T> alpha, ad::Var<T> delta) {
  const std::size_t B = H.dim(0), Tn = H.dim(1);
  ad::Var<T> weights = ad::mul(ad::reshape(alpha, {B, Tn, 1}), delta);
  return ad::bmm(weights, H, /*trans_a=*/true, /*trans_b=*/false);
}

template <typename T>
ad::Var<T> squash_layer(ad::Var<T> Q, ad::Var<T> W_s) {
  const std::size_t B = Q.dim(0), R = Q.dim(1), D = Q.dim(2), Hc = W_s.dim(1);
  ad::Var<T> lin = ad::matmul(ad::reshape(Q, {B * R, D}), W_s);
  return ad::reshape(ad::squash(lin, -1), {B, R, Hc});
}

template <typename T>
ad::Var<T> predict(ad::Var<T> S, ad::Var<T> W_p, std::size_t n_labels) {
  const std::size_t B = S.dim(0), R = S.dim(1), Hc = S.dim(2);
  if (W_p.shape().size() != 3 || W_p.dim(0) != R || W_p.dim(1) != Hc || W_p.dim(2) % n_labels != 0) {
    throw ShapeError("prediction weights " + shape_str(W_p.shape()) + " do not fit capsules " + shape_str(S.shape()));
  }
  const std::size_t Oc = W_p.dim(2) / n_labels;
  static constexpr std::array<std::size_t, 3> kSwap01{1, 0, 2};
  static constexpr std::array<std::size_t, 4> kSwap01of4{1, 0, 2, 3};
  ad::Var<T> per_cap = ad::bmm(ad::permute<T>(S, kSwap01), W_p);  // [R, B, L*Oc]
  return ad::permute<T>(ad::reshape(per_cap, {R, B, n_labels, Oc}), kSwap01of4);
}

template <typename T>
RoutingResult<T> dynamic_routing(ad::Var<T> P, ad::Var<T> B_init, std::size_t iters) {
  if (iters < 1) throw std::invalid_argument("routing needs at least one iteration");
  const Shape& sp = P.shape();
  if (sp.size() != 4 || B_init.shape() != Shape{sp[1], sp[2]}) {
    throw ShapeError("routing shapes mismatch: P " + shape_str(sp) + ", B " + shape_str(B_init.shape()));
  }
  const std::size_t B = sp[0], R = sp[1], L = sp[2], Oc = sp[3];
  ad::Var<T> logits = ad::add_const(B_init, Tensor<T>({B, R, L}));
  ad::Var<T> C, O;
  for (std::size_t n = 0; n < iters; ++n) {
    C = ad::softmax(logits, -1);
    ad::Var<T> weighted = ad::mul(ad::reshape(C, {B, R, L, 1}), P);
    O = ad::squash(ad::sum(weighted, 1), -1);  // [B, L, Oc]
    if (n + 1 < iters) {
      ad::Var<T> agreement = ad::sum(ad::mul(P, ad::reshape(O, {B, 1, L, Oc})), -1);  // [B, R, L]
      logits = ad::add(logits, agreement);
    }
  }
  return RoutingResult<T>{O, C};
}

template <typename T>
ad::Var<T> label_probs(ad::Var<T> O) {
  return ad::l2_norm(O, -1);
}

template <typename T>
ad::Var<T> margin_loss(ad::Var<T> l, const Tensor<T>& targets) {
  if (l.shape() != targets.shape()) {
    throw ShapeError("margin loss: probabilities " + shape_str(l.shape()) + " vs targets " + shape_str(targets.shape()));
  }
  Tensor<T> neg_targets(targets.shape());
  for (std::size_t i = 0; i < targets.size(); ++i) neg_targets[i] = T(1) - targets[i];
  ad::Var<T> pos = ad::relu(ad::add_scalar(ad::scale(l, T(-1)), T(0.9)));
  ad::Var<T> neg = ad::relu(ad::add_scalar(l, T(-0.1)));
  return ad::sum(ad::add(ad::mul_const(pos, targets), ad::mul_const(neg, neg_targets)), -1);
}

template <typename T>
CapsuleTrace<T> capsule_forward(const BoundParams<T>& p, const ModelConfig& cfg, ad::Var<T> x,
                                std::span<const std::size_t> lengths) {
  Encoded<T> enc = encode(p, cfg, x, lengths);
  CapsuleTrace<T> tr;
  tr.H = enc.H;
  tr.lengths = enc.lengths;
  const Tensor<T> mask = time_mask<T>(enc.lengths, enc.H.dim(1));
  tr.alpha = attention(tr.H, p("attention.w"), p("attention.b"), mask);
  tr.delta = distribute(tr.H, p("distributor.W"), p("distributor.b"));
  tr.Q = context(tr.H, tr.alpha, tr.delta);
  tr.S = squash_layer(tr.Q, p("squash.W"));
  tr.P = predict(tr.S, p("predict.W"), cfg.n_labels);
  RoutingResult<T> routed = dynamic_routing(tr.P, p("routing.B"), cfg.routing_iters);
  tr.O = routed.O;
  tr.C = routed.C;
  tr.l = label_probs(tr.O);
  return tr;
}

template <typename T>
ad::Var<T> baseline_forward(const BoundParams<T>& p, const ModelConfig& cfg, ad::Var<T> x,
                            std::span<const std::size_t> lengths) {
  Encoded<T> enc = encode(p, cfg, x, lengths);
  const std::size_t B = enc.H.dim(0), Tn = enc.H.dim(1), D = enc.H.dim(2);
  Tensor<T> mask({B, Tn, D});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < enc.lengths[b]; ++t)
      std::fill_n(mask.data().begin() + static_cast<long>((b * Tn + t) * D), D, T(1));
  ad::Var<T> pooled = ad::masked_max(enc.H, mask, 1);
  ad::Var<T> hidden = ad::relu(ad::add(ad::matmul(pooled, p("hidden.W")), p("hidden.b")));
  return ad::sigmoid(ad::add(ad::matmul(hidden, p("output.W")), p("output.b")));
}

template <typename T>
ad::Var<T> baseline_loss(ad::Var<T> l, const Tensor<T>& targets) {
  if (l.shape() != targets.shape()) {
    throw ShapeError("baseline loss: probabilities " + shape_str(l.shape()) + " vs targets " + shape_str(targets.shape()));
  }
  constexpr T kClip = T(1e-7);
  Tensor<T> neg_targets(targets.shape());
  for (std::size_t i = 0; i < targets.size(); ++i) neg_targets[i] = T(1) - targets[i];
  ad::Var<T> lc = ad::clamp(l, kClip, T(1) - kClip);
  ad::Var<T> log_p = ad::log(lc);
  ad::Var<T> log_q = ad::log(ad::add_scalar(ad::scale(lc, T(-1)), T(1)));
  ad::Var<T> ll = ad::add(ad::mul_const(log_p, targets), ad::mul_const(log_q, neg_targets));
  return ad::scale(ad::sum(ll, -1), T(-1) / static_cast<T>(l.dim(-1)));
}

template <typename T>
ad::Var<T> forward_probs(ModelKind kind, const BoundParams<T>& p, const ModelConfig& cfg, ad::Var<T> x,
                         std::span<const std::size_t> lengths) {
  if (kind == ModelKind::capsule) return capsule_forward(p, cfg, x, lengths).l;
  return baseline_forward(p, cfg, x, lengths);
}

template <typename T>
ad::Var<T> model_loss(ModelKind kind, ad::Var<T> l, const Tensor<T>& targets) {
  return kind == ModelKind::capsule ? margin_loss(l, targets) : baseline_loss(l, targets);
}

ForwardTrace trace_capsule(const ModelConfig& cfg, ParamSet<float>& params, const Tensor<float>& frames) {
  if (frames.rank() != 2) throw ShapeError("expected a [T,D] feature matrix");
  ad::Tape<float> tape;
  BoundParams<float> bound(tape, params);
  const std::size_t Tn = frames.dim(0);
  ad::Var<float> x = tape.constant(frames.reshaped({1, Tn, frames.dim(1)}));
  const std::array<std::size_t, 1> len{Tn};
  CapsuleTrace<float> tr = capsule_forward(bound, cfg, x, len);
  auto drop_batch = [](const ad::Var<float>& v) {
    Shape s(v.shape().begin() + 1, v.shape().end());
    return v.value().reshaped(s);
  };
  return ForwardTrace{drop_batch(tr.H), drop_batch(tr.alpha), drop_batch(tr.delta), drop_batch(tr.Q),
                      drop_batch(tr.S), drop_batch(tr.P),     drop_batch(tr.C),     drop_batch(tr.O),
                      drop_batch(tr.l)};
}

#define CAPSLU_INSTANTIATE_MODEL(T)                                                                              \
  template ParamSet<T> init_params<T>(ModelKind, const ModelConfig&, std::uint64_t);                             \
  template Tensor<T> time_mask<T>(std::span<const std::size_t>, std::size_t);                                    \
  template Encoded<T> encode(const BoundParams<T>&, const ModelConfig&, ad::Var<T>, std::span<const std::size_t>); \
  template ad::Var<T> attention(ad::Var<T>, ad::Var<T>, ad::Var<T>, const Tensor<T>&);                           \
  template ad::Var<T> distribute(ad::Var<T>, ad::Var<T>, ad::Var<T>);                                            \
  template ad::Var<T> context(ad::Var<T>, ad::Var<T>, ad::Var<T>);                                               \
  template ad::Var<T> squash_layer(ad::Var<T>, ad::Var<T>);                                                      \
  template ad::Var<T> predict(ad::Var<T>, ad::Var<T>, std::size_t);                                              \
  template RoutingResult<T> dynamic_routing(ad::Var<T>, ad::Var<T>, std::size_t);                                \
  template ad::Var<T> label_probs(ad::Var<T>);                                                                   \
  template ad::Var<T> margin_loss(ad::Var<T>, const Tensor<T>&);                                                 \
  template CapsuleTrace<T> capsule_forward(const BoundParams<T>&, const ModelConfig&, ad::Var<T>,                \
                                           std::span<const std::size_t>);                                        \
  template ad::Var<T> baseline_forward(const BoundParams<T>&, const ModelConfig&, ad::Var<T>,                    \
                                       std::span<const std::size_t>);                                            \
  template ad::Var<T> baseline_loss(ad::Var<T>, const Tensor<T>&);                                               \
  template ad::Var<T> forward_probs(ModelKind, const BoundParams<T>&, const ModelConfig&, ad::Var<T>,            \
                                    std::span<const std::size_t>);                                               \
  template ad::Var<T> model_loss(ModelKind, ad::Var<T>, const Tensor<T>&);

CAPSLU_INSTANTIATE_MODEL(float)
CAPSLU_INSTANTIATE_MODEL(double)

}  // namespace capslu
