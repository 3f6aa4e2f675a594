#include <cmath>
#include <numeric>

#include "capslu/trainer.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace capslu;

namespace {

ModelConfig toy_model(std::size_t input_dim, std::size_t n_labels) {
  ModelConfig c;
  c.input_dim = input_dim;
  c.encoder_units = 4;
  c.n_hidden_caps = 3;
  c.hidden_cap_dim = 4;
  c.output_cap_dim = 3;
  c.n_labels = n_labels;
  c.baseline_hidden = 6;
  return c;
}

/// Two groups {0,1} and {2,3}; each example gets a feature pattern tied to its labels.
SlotSpec toy_slots() {
  SlotSpec s;
  s.label_names = {"a0", "a1", "b0", "b1"};
  s.groups = {{"a", {0, 1}, false}, {"b", {2, 3}, false}};
  return s;
}

std::vector<Example> toy_examples(std::size_t n, std::uint64_t seed, std::size_t dim = 3) {
  Rng rng(seed);
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t a = i % 2, b = (i / 2) % 2;
    const std::size_t T = 3 + rng.index(6);
    Example ex;
    ex.id = "u" + std::to_string(i);
    ex.labels = {a, 2 + b};
    ex.features.frames = Tensor<float>({T, dim});
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t d = 0; d < dim; ++d)
        ex.features.frames.at({t, d}) = static_cast<float>((d == 0 ? (a ? 1.0 : -1.0) : d == 1 ? (b ? 1.0 : -1.0) : 0.0) +
                                                           rng.normal(0.0, 0.3));
    out.push_back(std::move(ex));
  }
  return out;
}

/// Adam written out for one scalar.
std::vector<double> adam_oracle(std::vector<double> grads, double theta, double lr) {
  double m = 0, v = 0;
  std::vector<double> trace;
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    const double g = grads[t - 1];
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, static_cast<double>(t)));
    const double vh = v / (1 - std::pow(0.999, static_cast<double>(t)));
    theta -= lr * mh / (std::sqrt(vh) + 1e-8);
    trace.push_back(theta);
  }
  return trace;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("adam leaves parameters alone under zero gradient") {
    ParamSet<double> ps;
    ps.add("w", Tensor<double>({3}, std::vector<double>{1, -2, 3}));
    AdamState<double> st;
    TrainConfig cfg;
    for (int i = 0; i < 5; ++i) adam_step(ps, st, cfg);
    CHECK(ps.at("w").value == Tensor<double>({3}, std::vector<double>{1, -2, 3}));
    CHECK(st.step == 5);
  }

  TEST_CASE("first adam step moves by the learning rate regardless of gradient size") {
    for (double g : {1.0, 1e-3, 250.0, -7.0}) {
      ParamSet<double> ps;
      ps.add("w", Tensor<double>({1}, 0.5));
      ps.at("w").grad[0] = g;
      AdamState<double> st;
      TrainConfig cfg;
      adam_step(ps, st, cfg);
      const double step = ps.at("w").value[0] - 0.5;
      CHECK(step == doctest::Approx(-std::copysign(1e-3, g)).epsilon(1e-4));
    }
  }

  TEST_CASE("three adam steps on a quadratic match the oracle") {
    // f(theta) = (theta - 3)^2, gradient 2 (theta - 3) evaluated at each iterate.
    ParamSet<double> ps;
    ps.add("w", Tensor<double>({1}, 0.0));
    AdamState<double> st;
    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    std::vector<double> grads, got;
    for (int i = 0; i < 3; ++i) {
      const double th = ps.at("w").value[0];
      grads.push_back(2 * (th - 3));
      ps.at("w").grad[0] = grads.back();
      adam_step(ps, st, cfg);
      got.push_back(ps.at("w").value[0]);
    }
    const auto want = adam_oracle(grads, 0.0, 0.1);
    for (int i = 0; i < 3; ++i) CHECK(std::abs(got[static_cast<std::size_t>(i)] - want[static_cast<std::size_t>(i)]) <= 1e-12);
  }

  TEST_CASE("adam rejects a mismatched state") {
    ParamSet<double> ps;
    ps.add("w", Tensor<double>({2}));
    AdamState<double> st;
    st.m.emplace_back(Shape{2});
    st.m.emplace_back(Shape{2});
    st.v = st.m;
    CHECK_THROWS_AS(adam_step(ps, st, TrainConfig{}), ShapeError);
  }

  TEST_CASE("batches keep the partial tail and follow the seed") {
    auto b = batch_indices(33, 16, true, 5, 0);
    REQUIRE(b.size() == 3);
    CHECK(b[0].size() == 16);
    CHECK(b[1].size() == 16);
    CHECK(b[2].size() == 1);
    std::vector<std::size_t> all;
    for (auto& v : b) all.insert(all.end(), v.begin(), v.end());
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> want(33);
    std::iota(want.begin(), want.end(), 0);
    CHECK(all == want);
    CHECK(batch_indices(33, 16, true, 5, 0) == b);
    CHECK(batch_indices(33, 16, true, 5, 1) != b);
    CHECK(batch_indices(33, 16, true, 6, 0) != b);
    CHECK(batch_indices(4, 3, false, 0, 0) == std::vector<std::vector<std::size_t>>{{0, 1, 2}, {3}});
  }

  TEST_CASE("padded batch layout") {
    const auto ex = toy_examples(3, 1);
    const std::vector<std::size_t> idx{2, 0};
    const PaddedBatch pb = make_batch(ex, idx, 4, 2);
    const std::size_t tmax = std::max(ex[2].features.length(), ex[0].features.length()) + 2;
    CHECK(pb.features.shape() == Shape{2, tmax, 3});
    CHECK(pb.lengths == std::vector<std::size_t>{ex[2].features.length(), ex[0].features.length()});
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t t = 0; t < tmax; ++t)
        for (std::size_t d = 0; d < 3; ++d) {
          const float want = t < pb.lengths[b] ? ex[idx[b]].features.frames.at({t, d}) : 0.0f;
          CHECK(pb.features.at({b, t, d}) == want);
        }
    CHECK(pb.targets.at({0, 0}) == 1.0f);  // example 2: labels {0, 3}
    CHECK(pb.targets.at({0, 3}) == 1.0f);
    CHECK(pb.targets.at({0, 1}) == 0.0f);
  }

  TEST_CASE("batched losses equal single-utterance losses under padding") {
    const auto ex = toy_examples(6, 3);
    for (ModelKind kind : {ModelKind::capsule, ModelKind::baseline}) {
      Checkpoint ck;
      ck.kind = kind;
      ck.config = toy_model(3, 4);
      ck.params = init_params<float>(kind, ck.config, 9);
      std::vector<FeatureSequence> fs;
      for (const auto& e : ex) fs.push_back(e.features);
      ck.norm = compute_norm_stats(fs);
      std::vector<std::size_t> all(ex.size());
      std::iota(all.begin(), all.end(), 0);
      for (std::size_t pad : {0u, 10u}) {
        const auto batched = batch_losses(ck, make_batch(ex, all, 4, pad));
        for (std::size_t i = 0; i < ex.size(); ++i) {
          const std::vector<std::size_t> one{i};
          const double alone = batch_losses(ck, make_batch(ex, one, 4))[0];
          CHECK(std::abs(batched[i] - alone) <= 1e-5);
        }
      }
    }
  }

  TEST_CASE("zero learning rate leaves the initial parameters") {
    const auto ex = toy_examples(5, 4);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.learning_rate = 0.0;
    cfg.seed = 17;
    const TrainResult r = train(ModelKind::capsule, toy_model(3, 4), ex, cfg);
    const auto init = init_params<float>(ModelKind::capsule, toy_model(3, 4), derive_seed(17, 1));
    for (std::size_t i = 0; i < init.size(); ++i) CHECK(r.checkpoint.params.entries()[i].param.value == init.entries()[i].param.value);
  }

  TEST_CASE("training loss decreases on a toy set") {
    const auto ex = toy_examples(5, 5);
    for (ModelKind kind : {ModelKind::capsule, ModelKind::baseline}) {
      TrainConfig cfg;
      cfg.epochs = 80;
      cfg.learning_rate = 0.01;
      cfg.seed = 2;
      std::vector<double> seen;
      const TrainResult r = train(kind, toy_model(3, 4), ex, cfg, [&](std::size_t, double l) { seen.push_back(l); });
      REQUIRE(r.epoch_loss.size() == 80);
      CHECK(seen == r.epoch_loss);
      MESSAGE(to_string(kind) << " loss " << r.epoch_loss.front() << " -> " << r.epoch_loss.back());
      CHECK(r.epoch_loss.back() < 0.5 * r.epoch_loss.front());
      CHECK(evaluate(const_cast<Checkpoint&>(r.checkpoint), ex, toy_slots()) == 1.0);
    }
  }

  TEST_CASE("training is deterministic") {
    const auto ex = toy_examples(7, 6);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 3;
    cfg.seed = 8;
    const TrainResult a = train(ModelKind::capsule, toy_model(3, 4), ex, cfg);
    const TrainResult b = train(ModelKind::capsule, toy_model(3, 4), ex, cfg);
    CHECK(a.epoch_loss == b.epoch_loss);
    CHECK(checkpoint_bytes(a.checkpoint) == checkpoint_bytes(b.checkpoint));
    cfg.seed = 9;
    const TrainResult c = train(ModelKind::capsule, toy_model(3, 4), ex, cfg);
    CHECK(checkpoint_bytes(a.checkpoint) != checkpoint_bytes(c.checkpoint));
    CHECK(loss_history_csv(a.epoch_loss).rfind("epoch,mean_loss\n1,", 0) == 0);
  }

  TEST_CASE("training input errors") {
    TrainConfig cfg;
    CHECK_THROWS(train(ModelKind::capsule, toy_model(3, 4), std::vector<Example>{}, cfg));
    CHECK_THROWS_AS(train(ModelKind::capsule, toy_model(5, 4), toy_examples(3, 1), cfg), ShapeError);
    cfg.batch_size = 0;
    CHECK_THROWS(cfg.validate());
  }

  TEST_CASE("decoding the targets themselves is always correct") {
    const SlotSpec slots = toy_slots();
    for (const auto& e : toy_examples(8, 7)) {
      const std::vector<float> t = target_vector(e.labels, 4);
      CHECK(decode<float>(t, slots) == e.labels);
    }
  }

  TEST_CASE("an all-zero model scores as constant lowest-index decoding") {
    const auto ex = toy_examples(13, 8);
    const SlotSpec slots = toy_slots();
    // Constant predictor: first label of each mandatory group.
    std::size_t hits = 0;
    for (const auto& e : ex) hits += e.labels == std::vector<std::size_t>{0, 2};
    const double oracle = static_cast<double>(hits) / static_cast<double>(ex.size());
    for (ModelKind kind : {ModelKind::capsule, ModelKind::baseline}) {
      Checkpoint ck;
      ck.kind = kind;
      ck.config = toy_model(3, 4);
      ck.params = init_params<float>(kind, ck.config, 1);
      for (auto& e : ck.params.entries()) e.param.value.fill(0.0f);
      ck.norm = NormStats::identity(3);
      CHECK(evaluate(ck, ex, slots) == oracle);
      CHECK_THROWS(evaluate(ck, std::vector<Example>{}, slots));
      SlotSpec wrong = slots;
      wrong.label_names.push_back("extra");
      wrong.groups[1].labels.push_back(4);
      CHECK_THROWS(evaluate(ck, ex, wrong));
    }
  }
}
