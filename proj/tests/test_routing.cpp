#include <cmath>
#include <vector>

#include "capslu/model.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace capslu;
using testing::random_tensor;

namespace {

using Vec = std::vector<double>;

/// Routing by agreement on plain nested vectors: p[i][j] is a vector, b[i][j] a logit.
struct OracleOut {
  std::vector<Vec> o;
  std::vector<Vec> c;
};

OracleOut routing_oracle(const std::vector<std::vector<Vec>>& p, std::vector<Vec> b, std::size_t iters) {
  const std::size_t R = p.size(), L = p[0].size(), K = p[0][0].size();
  OracleOut out{std::vector<Vec>(L, Vec(K)), std::vector<Vec>(R, Vec(L))};
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < R; ++i) {
      double mx = b[i][0], z = 0;
      for (double v : b[i]) mx = std::max(mx, v);
      for (std::size_t j = 0; j < L; ++j) z += std::exp(b[i][j] - mx);
      for (std::size_t j = 0; j < L; ++j) out.c[i][j] = std::exp(b[i][j] - mx) / z;
    }
    for (std::size_t j = 0; j < L; ++j) {
      Vec s(K, 0.0);
      for (std::size_t i = 0; i < R; ++i)
        for (std::size_t k = 0; k < K; ++k) s[k] += out.c[i][j] * p[i][j][k];
      double n2 = 0;
      for (double v : s) n2 += v * v;
      const double f = n2 / (1 + n2) / std::sqrt(n2 + 1e-18);
      for (std::size_t k = 0; k < K; ++k) out.o[j][k] = f * s[k];
    }
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t j = 0; j < L; ++j)
        for (std::size_t k = 0; k < K; ++k) b[i][j] += p[i][j][k] * out.o[j][k];
  }
  return out;
}

double squash_factor(double n2) { return n2 / (1 + n2) / std::sqrt(n2); }

}  // namespace

TEST_SUITE("routing") {
  TEST_CASE("matches a standalone implementation on 100 random instances") {
    Rng rng(41);
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t R = 1 + rng.index(4), L = 1 + rng.index(4), N = 1 + rng.index(4), K = 1 + rng.index(4);
      const std::size_t B = 1 + rng.index(2);
      Tensor<double> P = random_tensor(rng, {B, R, L, K}, -2, 2), Bi = random_tensor(rng, {R, L}, -1, 1);
      ad::Tape<double> tape;
      RoutingResult<double> res = dynamic_routing(tape.constant(P), tape.constant(Bi), N);
      for (std::size_t b = 0; b < B; ++b) {
        std::vector<std::vector<Vec>> p(R, std::vector<Vec>(L, Vec(K)));
        std::vector<Vec> logits(R, Vec(L));
        for (std::size_t i = 0; i < R; ++i)
          for (std::size_t j = 0; j < L; ++j) {
            logits[i][j] = Bi.at({i, j});
            for (std::size_t k = 0; k < K; ++k) p[i][j][k] = P.at({b, i, j, k});
          }
        const OracleOut o = routing_oracle(p, logits, N);
        for (std::size_t j = 0; j < L; ++j)
          for (std::size_t k = 0; k < K; ++k) worst = std::max(worst, std::abs(res.O.value().at({b, j, k}) - o.o[j][k]));
        for (std::size_t i = 0; i < R; ++i)
          for (std::size_t j = 0; j < L; ++j) worst = std::max(worst, std::abs(res.C.value().at({b, i, j}) - o.c[i][j]));
      }
    }
    CHECK(worst <= 1e-10);
  }

  TEST_CASE("one iteration from zero logits is average then squash") {
    Rng rng(43);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t R = 1 + rng.index(4), L = 1 + rng.index(4), K = 1 + rng.index(4);
      Tensor<double> P = random_tensor(rng, {1, R, L, K}, -2, 2);
      ad::Tape<double> tape;
      RoutingResult<double> res = dynamic_routing(tape.constant(P), tape.constant(Tensor<double>({R, L})), 1);
      for (double c : res.C.value().data()) CHECK(std::abs(c - 1.0 / static_cast<double>(L)) <= 1e-15);
      for (std::size_t j = 0; j < L; ++j) {
        Vec s(K, 0.0);
        double n2 = 0;
        for (std::size_t k = 0; k < K; ++k) {
          for (std::size_t i = 0; i < R; ++i) s[k] += P.at({0, i, j, k}) / static_cast<double>(L);
          n2 += s[k] * s[k];
        }
        for (std::size_t k = 0; k < K; ++k) CHECK(std::abs(res.O.value().at({0, j, k}) - squash_factor(n2) * s[k]) <= 1e-10);
      }
    }
  }

  TEST_CASE("a single hidden capsule") {
    Rng rng(45);
    Tensor<double> P = random_tensor(rng, {1, 1, 3, 4}), Bi = random_tensor(rng, {1, 3});
    ad::Tape<double> tape;
    RoutingResult<double> res = dynamic_routing(tape.constant(P), tape.constant(Bi), 3);
    const Tensor<double>& O = res.O.value();
    const Tensor<double>& C = res.C.value();
    for (std::size_t j = 0; j < 3; ++j) {
      double n2 = 0;
      for (std::size_t k = 0; k < 4; ++k) n2 += std::pow(C[j] * P.at({0, 0, j, k}), 2);
      for (std::size_t k = 0; k < 4; ++k) CHECK(O.at({0, j, k}) == doctest::Approx(squash_factor(n2) * C[j] * P.at({0, 0, j, k})).epsilon(1e-12));
    }
  }

  TEST_CASE("identical predictions keep coupling rows identical") {
    Rng rng(47);
    for (std::size_t N : {1u, 2u, 3u, 5u}) {
      const std::size_t R = 4, L = 3, K = 5;
      Tensor<double> one = random_tensor(rng, {L, K});
      Tensor<double> P({1, R, L, K});
      for (std::size_t i = 0; i < R; ++i) std::copy(one.data().begin(), one.data().end(), P.data().begin() + static_cast<long>(i * L * K));
      Tensor<double> Bi({R, L});
      const Tensor<double> row = random_tensor(rng, {L});
      for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < L; ++j) Bi.at({i, j}) = row[j];
      ad::Tape<double> tape;
      const Tensor<double>& C = dynamic_routing(tape.constant(P), tape.constant(Bi), N).C.value();
      for (std::size_t i = 1; i < R; ++i)
        for (std::size_t j = 0; j < L; ++j) CHECK(C.at({0, i, j}) == C.at({0, 0, j}));
    }
  }

  TEST_CASE("routing is invariant to relabeling hidden capsules") {
    Rng rng(49);
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t R = 4, L = 3, K = 2;
      Tensor<double> P = random_tensor(rng, {1, R, L, K}, -2, 2), Bi = random_tensor(rng, {R, L});
      std::vector<std::size_t> perm{0, 1, 2, 3};
      rng.shuffle(std::span<std::size_t>(perm));
      Tensor<double> Pp({1, R, L, K}), Bp({R, L});
      for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < L; ++j) {
          Bp.at({i, j}) = Bi.at({perm[i], j});
          for (std::size_t k = 0; k < K; ++k) Pp.at({0, i, j, k}) = P.at({0, perm[i], j, k});
        }
      ad::Tape<double> tape;
      RoutingResult<double> a = dynamic_routing(tape.constant(P), tape.constant(Bi), 3);
      RoutingResult<double> b = dynamic_routing(tape.constant(Pp), tape.constant(Bp), 3);
      CHECK(testing::max_abs_diff(a.O.value(), b.O.value()) < 1e-12);
      for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < L; ++j) CHECK(std::abs(b.C.value().at({0, i, j}) - a.C.value().at({0, perm[i], j})) < 1e-12);
    }
  }

  TEST_CASE("coupling rows sum to one and output norms stay below one") {
    Rng rng(51);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t R = 1 + rng.index(6), L = 2 + rng.index(5), K = 1 + rng.index(8);
      Tensor<double> P = random_tensor(rng, {2, R, L, K}, -20, 20), Bi = random_tensor(rng, {R, L}, -5, 5);
      ad::Tape<double> tape;
      RoutingResult<double> res = dynamic_routing(tape.constant(P), tape.constant(Bi), 1 + rng.index(5));
      for (std::size_t row = 0; row < 2 * R; ++row) {
        double s = 0;
        for (std::size_t j = 0; j < L; ++j) s += res.C.value()[row * L + j];
        CHECK(std::abs(s - 1.0) < 1e-6);
      }
      for (std::size_t j = 0; j < 2 * L; ++j) {
        double n2 = 0;
        for (std::size_t k = 0; k < K; ++k) n2 += std::pow(res.O.value()[j * K + k], 2);
        CHECK(std::sqrt(n2) < 1.0);
      }
    }
  }

  TEST_CASE("invalid routing arguments") {
    ad::Tape<double> tape;
    CHECK_THROWS(dynamic_routing(tape.constant(Tensor<double>({1, 2, 3, 4})), tape.constant(Tensor<double>({2, 3})), 0));
    CHECK_THROWS_AS(dynamic_routing(tape.constant(Tensor<double>({1, 2, 3, 4})), tape.constant(Tensor<double>({3, 2})), 1),
                    ShapeError);
  }
}
