#include <array>
#include <cmath>
#include <limits>

#include "capslu/autodiff.hpp"
#include "capslu/gradcheck.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace capslu;
using testing::random_tensor;
using V = ad::Var<double>;

namespace {

double norm(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

const std::vector<std::string> kModelCases{"encoder", "capsule_model", "baseline_model"};

}  // namespace

TEST_SUITE("autodiff") {
  TEST_CASE("softmax of a uniform vector") {
    for (std::size_t k : {1u, 2u, 5u, 32u}) {
      ad::Tape<double> tape;
      V y = ad::softmax(tape.constant(Tensor<double>({k}, 0.7)), 0);
      for (double v : y.value().data()) CHECK(v == doctest::Approx(1.0 / static_cast<double>(k)).epsilon(1e-15));
    }
  }

  TEST_CASE("softmax rows are positive and sum to one") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
      ad::Tape<double> tape;
      Tensor<double> x = random_tensor(rng, {3, 4, 6}, -30, 30);
      const Tensor<double>& y = ad::softmax(tape.constant(x), 1).value();
      for (std::size_t a = 0; a < 3; ++a) {
        for (std::size_t c = 0; c < 6; ++c) {
          double s = 0;
          for (std::size_t b = 0; b < 4; ++b) {
            CHECK(y.at({a, b, c}) > 0.0);
            s += y.at({a, b, c});
          }
          CHECK(std::abs(s - 1.0) < 1e-6);
        }
      }
    }
  }

  TEST_CASE("l2_norm at zero has value and gradient zero") {
    Parameter<double> p(Tensor<double>({2, 3}));
    ad::Tape<double> tape;
    V n = ad::l2_norm(tape.parameter(p), -1);
    CHECK(n.value()[0] == 0.0);
    CHECK(n.value()[1] == 0.0);
    tape.backward(ad::sum_all(n));
    for (double g : p.grad.data()) CHECK(g == 0.0);
  }

  TEST_CASE("squash analytics") {
    ad::Tape<double> tape;
    SUBCASE("zero maps to zero with finite gradient") {
      Parameter<double> p(Tensor<double>({4}));
      ad::Tape<double> t2;
      V s = ad::squash(t2.parameter(p), 0);
      for (double v : s.value().data()) CHECK(v == 0.0);
      t2.backward(ad::sum_all(s));
      for (double g : p.grad.data()) CHECK(std::isfinite(g));
    }
    SUBCASE("unit norm maps to 0.5, norm 3 maps to 0.9, direction kept") {
      Tensor<double> x({2, 3}, std::vector<double>{0.6, 0.0, 0.8, 1.0, 2.0, 2.0});
      const Tensor<double>& s = ad::squash(tape.constant(x), -1).value();
      CHECK(norm(s.data().subspan(0, 3)) == doctest::Approx(0.5).epsilon(1e-12));
      CHECK(norm(s.data().subspan(3, 3)) == doctest::Approx(0.9).epsilon(1e-12));
      for (std::size_t i = 0; i < 3; ++i) {
        CHECK(s[i] == doctest::Approx(0.5 * x[i]).epsilon(1e-12));
        CHECK(s[3 + i] == doctest::Approx(0.3 * x[3 + i]).epsilon(1e-12));
      }
    }
    SUBCASE("norm formula holds to 1e-10 across scales, including near zero") {
      Rng rng(11);
      for (int trial = 0; trial < 500; ++trial) {
        const double scale = std::pow(10.0, rng.uniform(-12, 3));
        Tensor<double> x = random_tensor(rng, {5});
        for (double& v : x.data()) v *= scale;
        const double n = norm(x.data());
        const Tensor<double>& s = ad::squash(tape.constant(x), 0).value();
        CHECK(std::abs(norm(s.data()) - n * n / (1.0 + n * n)) <= 1e-10);
        CHECK(norm(s.data()) < 1.0);
      }
    }
    SUBCASE("output norm is strictly increasing in input norm") {
      Rng rng(12);
      Tensor<double> dir = random_tensor(rng, {6});
      double prev = -1.0;
      for (double k = 0.01; k < 50.0; k *= 1.3) {
        Tensor<double> x = dir;
        for (double& v : x.data()) v *= k;
        const double n = norm(ad::squash(tape.constant(x), 0).value().data());
        CHECK(n > prev);
        prev = n;
      }
    }
  }

  TEST_CASE("subsample keeps every second frame") {
    ad::Tape<double> tape;
    for (std::size_t T : {1u, 4u, 5u}) {
      Tensor<double> x({1, T, 1});
      for (std::size_t t = 0; t < T; ++t) x[t] = static_cast<double>(t);
      const Tensor<double>& y = ad::subsample(tape.constant(x), 1, 2).value();
      CHECK(y.dim(1) == (T + 1) / 2);
      for (std::size_t t = 0; t < y.dim(1); ++t) CHECK(y[t] == static_cast<double>(2 * t));
    }
  }

  TEST_CASE("subsample sends no gradient to dropped frames") {
    Rng rng(2);
    Parameter<double> p(random_tensor(rng, {2, 5, 3}));
    ad::Tape<double> tape;
    tape.backward(ad::sum_all(ad::subsample(tape.parameter(p), 1, 2)));
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t t = 0; t < 5; ++t) {
        for (std::size_t d = 0; d < 3; ++d) CHECK(p.grad.at({b, t, d}) == (t % 2 == 0 ? 1.0 : 0.0));
      }
    }
  }

  TEST_CASE("backward rules") {
    Rng rng(4);
    SUBCASE("non-scalar loss is rejected") {
      Parameter<double> p(random_tensor(rng, {3}));
      ad::Tape<double> tape;
      CHECK_THROWS_AS(tape.backward(tape.parameter(p)), ShapeError);
    }
    SUBCASE("loss independent of a parameter leaves its gradient zero") {
      Parameter<double> p(random_tensor(rng, {3}));
      ad::Tape<double> tape;
      tape.parameter(p);
      tape.backward(ad::sum_all(tape.constant(random_tensor(rng, {2}))));
      for (double g : p.grad.data()) CHECK(g == 0.0);
    }
    SUBCASE("sum of a parameter gives a gradient of ones") {
      Parameter<double> p(random_tensor(rng, {2, 3}));
      ad::Tape<double> tape;
      tape.backward(ad::sum_all(tape.parameter(p)));
      for (double g : p.grad.data()) CHECK(g == 1.0);
    }
    SUBCASE("gradients accumulate until zeroed") {
      Parameter<double> p(random_tensor(rng, {2}));
      for (int k = 0; k < 2; ++k) {
        ad::Tape<double> tape;
        tape.backward(ad::sum_all(tape.parameter(p)));
      }
      CHECK(p.grad[0] == 2.0);
      p.zero_grad();
      CHECK(p.grad[0] == 0.0);
    }
    SUBCASE("a parameter used twice receives both contributions") {
      Parameter<double> p(Tensor<double>({1}, 3.0));
      ad::Tape<double> tape;
      V x = tape.parameter(p);
      tape.backward(ad::sum_all(ad::mul(x, x)));
      CHECK(p.grad[0] == doctest::Approx(6.0));
    }
  }

  TEST_CASE("identical passes give bit-identical gradients") {
    Rng rng(8);
    Tensor<double> w0 = random_tensor(rng, {4, 5}), x = random_tensor(rng, {3, 4});
    std::vector<Tensor<double>> grads;
    for (int run = 0; run < 2; ++run) {
      Parameter<double> w(w0);
      ad::Tape<double> tape;
      V h = ad::tanh(ad::matmul(tape.constant(x), tape.parameter(w)));
      tape.backward(ad::sum_all(ad::squash(ad::softmax(h, -1), -1)));
      grads.push_back(w.grad);
    }
    CHECK(grads[0] == grads[1]);
  }

  TEST_CASE("broadcast and shape errors") {
    ad::Tape<double> tape;
    V a = tape.constant(Tensor<double>({2, 3}));
    CHECK_THROWS_AS(ad::add(a, tape.constant(Tensor<double>({2}))), ShapeError);
    CHECK(ad::add(a, tape.constant(Tensor<double>({3}))).shape() == Shape{2, 3});
    CHECK(ad::mul(a, tape.constant(Tensor<double>({2, 1}))).shape() == Shape{2, 3});
    CHECK_THROWS_AS(ad::matmul(a, a), ShapeError);
    CHECK_THROWS_AS(ad::slice(a, 1, 2, 2), ShapeError);
    const std::array<std::size_t, 2> bad{0, 0};
    CHECK_THROWS_AS(ad::permute<double>(a, bad), ShapeError);
  }

  TEST_CASE("non-finite values are reported when checking is on") {
    ad::Tape<double> tape;
    tape.set_check_finite(true);
    CHECK_THROWS_AS(ad::log(tape.constant(Tensor<double>({1}, -1.0))), std::domain_error);
  }

  TEST_CASE("linear ops match loop oracles") {
    Rng rng(21);
    ad::Tape<double> tape;
    Tensor<double> a = random_tensor(rng, {2, 3, 4}), b = random_tensor(rng, {2, 4, 5});
    const Tensor<double>& c = ad::bmm(tape.constant(a), tape.constant(b)).value();
    for (std::size_t n = 0; n < 2; ++n) {
      for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 5; ++j) {
          double s = 0;
          for (std::size_t k = 0; k < 4; ++k) s += a.at({n, i, k}) * b.at({n, k, j});
          CHECK(c.at({n, i, j}) == doctest::Approx(s).epsilon(1e-13));
        }
      }
    }
    Tensor<double> bt = random_tensor(rng, {2, 5, 4});
    const Tensor<double>& ct = ad::bmm(tape.constant(a), tape.constant(bt), false, true).value();
    for (std::size_t n = 0; n < 2; ++n) {
      for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 5; ++j) {
          double s = 0;
          for (std::size_t k = 0; k < 4; ++k) s += a.at({n, i, k}) * bt.at({n, j, k});
          CHECK(ct.at({n, i, j}) == doctest::Approx(s).epsilon(1e-13));
        }
      }
    }
    const std::array<std::size_t, 3> perm{2, 0, 1};
    const Tensor<double>& p = ad::permute<double>(tape.constant(a), perm).value();
    CHECK(p.shape() == Shape{4, 2, 3});
    CHECK(p.at({3, 1, 2}) == a.at({1, 2, 3}));
    const std::array<V, 2> parts{tape.constant(a), tape.constant(a)};
    const Tensor<double>& cat = ad::concat<double>(parts, 1).value();
    CHECK(cat.shape() == Shape{2, 6, 4});
    CHECK(cat.at({1, 4, 2}) == a.at({1, 1, 2}));
    const Tensor<double>& sl = ad::slice(tape.constant(a), 2, 1, 2).value();
    CHECK(sl.at({1, 2, 1}) == a.at({1, 2, 2}));
    const Tensor<double>& sp = ad::scalar_product(tape.constant(a), tape.constant(a), -1).value();
    CHECK(sp.at({1, 1}) == doctest::Approx(a.at({1, 1, 0}) * a.at({1, 1, 0}) + a.at({1, 1, 1}) * a.at({1, 1, 1}) +
                                           a.at({1, 1, 2}) * a.at({1, 1, 2}) + a.at({1, 1, 3}) * a.at({1, 1, 3})));
  }

  TEST_CASE("max breaks ties toward the lowest index") {
    Parameter<double> p(Tensor<double>({3}, std::vector<double>{2.0, 2.0, 1.0}));
    ad::Tape<double> tape;
    tape.backward(ad::sum_all(ad::max(tape.parameter(p), 0)));
    CHECK(p.grad[0] == 1.0);
    CHECK(p.grad[1] == 0.0);
  }

  TEST_CASE("masked_max ignores masked entries") {
    Tensor<double> x({1, 3, 1}, std::vector<double>{1.0, 5.0, 9.0});
    Tensor<double> mask({1, 3, 1}, std::vector<double>{1.0, 1.0, 0.0});
    ad::Tape<double> tape;
    CHECK(ad::masked_max(tape.constant(x), mask, 1).value().item() == 5.0);
  }

  TEST_CASE("every op passes the finite-difference check on 20 seeds") {
    gradcheck::Options opt;
    opt.seeds = 20;
    opt.root_seed = 1234;
    for (const std::string& name : gradcheck::case_names()) {
      if (std::find(kModelCases.begin(), kModelCases.end(), name) == kModelCases.end()) opt.only.push_back(name);
    }
    for (const auto& r : gradcheck::run(opt)) {
      INFO(r.name << " max relative error " << r.max_rel_error);
      CHECK(r.trials == 20);
      CHECK(r.max_rel_error < 1e-4);
    }
  }

  TEST_CASE("a corrupted backward rule is detected") {
    for (const char* name : {"softmax", "gru_forward", "dynamic_routing"}) {
      gradcheck::Options opt;
      opt.seeds = 2;
      opt.only = {name};
      opt.corrupt = name;
      const auto r = gradcheck::run(opt);
      REQUIRE(r.size() == 1);
      CHECK_FALSE(r[0].passed);
      CHECK(r[0].max_rel_error > 0.1);
    }
  }

  TEST_CASE("gradcheck rejects unknown case names") {
    gradcheck::Options opt;
    opt.only = {"no_such_op"};
    CHECK_THROWS_AS(gradcheck::run(opt), std::invalid_argument);
  }

  TEST_CASE("relative error reports a wrong gradient") {
    ParamSet<double> ps;
    ps.add("x", Tensor<double>({2}, std::vector<double>{0.3, -0.7}));
    // Forward is x*x but the recorded backward claims 3x.
    gradcheck::Function f = [](ad::Tape<double>& tape, const BoundParams<double>& p) {
      V x = p("x");
      const std::size_t id = x.id();
      Tensor<double> val = x.value();
      for (double& v : val.data()) v *= v;
      return tape.record(val, {id}, [id, xv = x.value()](ad::Tape<double>& tp, const Tensor<double>& g) {
        Tensor<double> gx = g;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= 3.0 * xv[i];
        tp.accumulate(id, gx);
      });
    };
    CHECK(gradcheck::max_relative_error(ps, f) == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
  }
}
