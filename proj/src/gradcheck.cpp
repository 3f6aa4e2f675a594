#include "capslu/gradcheck.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "capslu/gru.hpp"
#include "capslu/rng.hpp"

namespace capslu::gradcheck {

namespace {

Tensor<double> projection(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> w(shape);
  for (double& v : w.data()) v = rng.uniform(-1.0, 1.0);
  return w;
}

double eval_loss(ParamSet<double>& params, const Function& f, const Tensor<double>& w) {
  ad::Tape<double> tape;
  BoundParams<double> bound(tape, params, false);
  ad::Var<double> out = f(tape, bound);
  const Tensor<double>& v = out.value();
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * w[i];
  return s;
}

Tensor<double> uniform_tensor(Rng& rng, Shape shape, double lo, double hi) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Uniform magnitudes in [lo, hi] with random sign, keeping values off kinks at 0.
Tensor<double> signed_tensor(Rng& rng, Shape shape, double lo, double hi) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.data()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
  return t;
}

/// Values in (0, 1) at least `gap` away from every point in `avoid`.
Tensor<double> unit_tensor_avoiding(Rng& rng, Shape shape, std::initializer_list<double> avoid, double gap) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.data()) {
    bool ok = false;
    while (!ok) {
      v = rng.uniform(0.02, 0.98);
      ok = std::all_of(avoid.begin(), avoid.end(), [&](double a) { return std::abs(v - a) > gap; });
    }
  }
  return t;
}

Tensor<double> binary_targets(Rng& rng, std::size_t B, std::size_t L) {
  Tensor<double> t({B, L});
  for (std::size_t b = 0; b < B; ++b) {
    t[b * L + rng.index(L)] = 1.0;
    if (L > 2 && rng.uniform() < 0.5) t[b * L + rng.index(L)] = 1.0;
  }
  return t;
}

struct Case {
  std::string name;
  /// Fills the parameter set for one trial and returns the function under test.
  std::function<Function(Rng&, ParamSet<double>&)> setup;
};

Function unary(ad::Var<double> (*op)(ad::Var<double>)) {
  return [op](ad::Tape<double>&, const BoundParams<double>& p) { return op(p("x")); };
}

ParamSet<double> perturbed_model(ModelKind kind, const ModelConfig& cfg, Rng& rng) {
  ParamSet<double> ps = init_params<double>(kind, cfg, rng.bits());
  for (auto& e : ps.entries()) {
    for (double& v : e.param.value.data()) v += rng.normal(0.0, 0.2);
  }
  return ps;
}

Function model_case(ModelKind kind, const ModelConfig& cfg, Rng& rng, ParamSet<double>& ps) {
  ps = perturbed_model(kind, cfg, rng);
  const std::size_t B = 2, T = 6;
  Tensor<double> x({B, T, cfg.input_dim});
  const std::vector<std::size_t> lengths{T, T - 2};
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < lengths[b]; ++t) {
      for (std::size_t d = 0; d < cfg.input_dim; ++d) x[(b * T + t) * cfg.input_dim + d] = rng.normal();
    }
  }
  Tensor<double> targets = binary_targets(rng, B, cfg.n_labels);
  return [kind, cfg, x, lengths, targets](ad::Tape<double>& tape, const BoundParams<double>& p) {
    ad::Var<double> probs = forward_probs(kind, p, cfg, tape.constant(x), lengths);
    return ad::mean_all(model_loss(kind, probs, targets));
  };
}

std::vector<Case> build_cases(const ModelConfig& mcfg) {
  using V = ad::Var<double>;
  using P = BoundParams<double>;
  using Tp = ad::Tape<double>;
  std::vector<Case> cases;
  auto add_case = [&](std::string name, std::function<Function(Rng&, ParamSet<double>&)> setup) {
    cases.push_back(Case{std::move(name), std::move(setup)});
  };

  add_case("add", [](Rng& r, ParamSet<double>& ps) {
    ps.add("a", uniform_tensor(r, {2, 3, 4}, -1, 1));
    ps.add("b", uniform_tensor(r, {3, 1}, -1, 1));
    return Function([](Tp&, const P& p) { return ad::add(p("a"), p("b")); });
  });
  add_case("sub", [](Rng& r, ParamSet<double>& ps) {
    ps.add("a", uniform_tensor(r, {4}, -1, 1));
    ps.add("b", uniform_tensor(r, {3, 4}, -1, 1));
    return Function([](Tp&, const P& p) { return ad::sub(p("a"), p("b")); });
  });
  add_case("mul", [](Rng& r, ParamSet<double>& ps) {
    ps.add("a", uniform_tensor(r, {2, 3, 4}, -1, 1));
    ps.add("b", uniform_tensor(r, {2, 1, 4}, -1, 1));
    return Function([](Tp&, const P& p) { return ad::mul(p("a"), p("b")); });
  });
  add_case("mul_const", [](Rng& r, ParamSet<double>& ps) {
    ps.add("x", uniform_tensor(r, {3, 4}, -1, 1));
    Tensor<double> c = uniform_tensor(r, {3, 4}, -2, 2);
    return Function([c](Tp&, const P& p) { return ad::mul_const(p("x"), c); });
  });
  add_case("add_const", [](Rng& r, ParamSet<double>& ps) {
    ps.add("x", uniform_tensor(r, {4}, -1, 1));
    Tensor<double> c = uniform_tensor(r, {3, 4}, -2, 2);
    return Function([c](Tp&, const P& p) { return ad::add_const(p("x"), c); });
  });
  add_case("add_scalar", [](Rng& r, ParamSet<double>& ps) {
    ps.add("x", uniform_tensor(r, {5}, -1, 1));
    const double c = r.uniform(-2, 2);
    return Function([c](Tp&, const P& p) { return ad::add_scalar(p("x"), c); });
  });
  add_case("scale", [](Rng& r, ParamSet<double>& ps) {
    ps.add("x", uniform_tensor(r, {2, 3}, -1, 1));
    const double c = r.uniform(-2, 2);
    return Function([c](Tp&, const P& p) { return ad::scale(p("x"), c); });
  });
  add_case("matmul", [](Rng& r, ParamSet<double>& ps) {
    ps.add("a", uniform_tensor(r, {3, 4}, -1, 1));
    ps.add("b", uniform_tensor(r, {4, 5}, -1, 1));
    return Function([](Tp&, const P& p) { return ad::matmul(p("a"), p("b")); });
  });
  for (int ta = 0; ta < 2; ++ta) {
    for (int tb = 0; tb < 2; ++tb) {
      add_case(std::string("bmm") + (ta ? "_ta" : "") + (tb ? "_tb" : ""), [ta, tb](Rng& r, ParamSet<double>& ps) {
        ps.add("a", uniform_tensor(r, ta ? Shape{2, 4, 3} : Shape{2, 3, 4}, -1, 1));
        ps.add("b", uniform_tensor(r, tb ? Shape{2, 5, 4} : Shape{2, 4, 5}, -1, 1));
        return Function([ta, tb](Tp&, const P& p) { return ad::bmm(p("a"), p("b"), ta != 0, tb != 0); });
      });
    }
  }
  add_case("concat", [](Rng& r, ParamSet<double>& ps) {
    ps.add("a", uniform_tensor(r, {2, 3, 2}, -1, 1));
    ps.add("b", uniform_tensor(r, {2, 3, 4}, -1, 1));
    return Function([](Tp&, const P& p) {
      const std::array<V, 2> parts{p("a"), p("b")};
      return ad::concat<double>(parts, -1);
    });
  });
  add_case("slice", [](Rng& r, ParamSet<double>& ps) {
    ps.add("x", uniform_tensor(r, {3, 5, 2}, -1, 1));
    return Function([](Tp&, const P& p) { return ad::slice(p("x"), 1, 1, 3); });
  });
  add_case("reshape", [](Rng& r, ParamSet<double>& ps) {
    ps.add("x", uniform_tensor(r, {3, 4}, -1, 1));
    return Function([](Tp&, const P& p) { return ad::reshape(p("x"), Shape{2, 6}); });
  });
  add_case("permute", [](Rng& r, ParamSet<double>& ps) {
    ps.add("x", uniform_tensor(r, {2, 3, 4}, -1, 1));
    return Function([](Tp&, const P& p) {
      const std::array<std::size_t, 3> perm{2, 0, 1};
      return ad::permute<double>(p("x"), perm);
    });
  });
  add_case("sum", [](Rng& r, ParamSet<double>& ps) {
    ps.add("x", uniform_tensor(r, {2, 3, 4}, -1, 1));
    return Function([](Tp&, const P& p) { return ad::add(ad::sum(p("x"), 0), ad::sum(p("x"), -1, true)); });
  });
  add_case("sum_all", [](Rng& r, ParamSet<double>& ps) {
    ps.add("x", uniform_tensor(r, {2, 3}, -1, 1));
    return Function([](Tp&, const P& p) { return ad::sum_all(ad::mul(p("x"), p("x"))); });
  });
  add_case("mean_all", [](Rng& r, ParamSet<double>& ps) {
    ps.add("x", uniform_tensor(r, {2, 3}, -1, 1));
    return Function([](Tp&, const P& p) { return ad::mean_all(ad::mul(p("x"), p("x"))); });
  });
  add_case("max", [](Rng& r, ParamSet<double>& ps) {
    ps.add("x", uniform_tensor(r, {2, 5, 3}, -1, 1));
    return Function([](Tp&, const P& p) { return ad::max(p("x"), 1); });
  });
  add_case("masked_max", [](Rng& r, ParamSet<double>& ps) {
    ps.add("x", uniform_tensor(r, {2, 5, 3}, -1, 1));
    Tensor<double> mask({2, 5, 3}, 1.0);
    for (std::size_t t = 3; t < 5; ++t) {
      for (std::size_t d = 0; d < 3; ++d) mask[(5 + t) * 3 + d] = 0.0;
    }
    return Function([mask](Tp&, const P& p) { return ad::masked_max(p("x"), mask, 1); });
  });
  add_case("sigmoid", [](Rng& r, ParamSet<double>& ps) {
    ps.add("x", uniform_tensor(r, {3, 4}, -3, 3));
    return unary(&ad::sigmoid<double>);
  });
  add_case("tanh", [](Rng& r, ParamSet<double>& ps) {
    ps.add("x", uniform_tensor(r, {3, 4}, -3, 3));
    return unary(&ad::tanh<double>);
  });
  add_case("relu", [](Rng& r, ParamSet<double>& ps) {
    ps.add("x", signed_tensor(r, {3, 4}, 0.01, 2));
    return unary(&ad::relu<double>);
  });
  add_case("log", [](Rng& r, ParamSet<double>& ps) {
    ps.add("x", uniform_tensor(r, {3, 4}, 0.1, 3));
    return unary(&ad::log<double>);
  });
  add_case("clamp", [](Rng& r, ParamSet<double>& ps) {
    Tensor<double> x = uniform_tensor(r, {3, 4}, -2, 2);
    for (double& v : x.data()) {
      if (std::abs(std::abs(v) - 1.0) < 0.01) v *= 1.05;
    }
    ps.add("x", x);
    return Function([](Tp&, const P& p) { return ad::clamp(p("x"), -1.0, 1.0); });
  });
  add_case("softmax", [](Rng& r, ParamSet<double>& ps) {
    ps.add("x", uniform_tensor(r, {2, 3, 4}, -2, 2));
    return Function([](Tp&, const P& p) { return ad::add(ad::softmax(p("x"), -1), ad::softmax(p("x"), 1)); });
  });
  add_case("l2_norm", [](Rng& r, ParamSet<double>& ps) {
    ps.add("x", uniform_tensor(r, {3, 4}, -1, 1));
    return Function([](Tp&, const P& p) { return ad::l2_norm(p("x"), -1); });
  });
  add_case("scalar_product", [](Rng& r, ParamSet<double>& ps) {
    ps.add("a", uniform_tensor(r, {2, 3, 4}, -1, 1));
    ps.add("b", uniform_tensor(r, {3, 4}, -1, 1));
    return Function([](Tp&, const P& p) { return ad::scalar_product(p("a"), p("b"), -1); });
  });
  add_case("squash", [](Rng& r, ParamSet<double>& ps) {
    Tensor<double> x = uniform_tensor(r, {4, 3}, -2, 2);
    for (std::size_t d = 0; d < 3; ++d) x[d] *= 1e-2;
    ps.add("x", x);
    return Function([](Tp&, const P& p) { return ad::squash(p("x"), -1); });
  });
  add_case("subsample", [](Rng& r, ParamSet<double>& ps) {
    ps.add("x", uniform_tensor(r, {2, 5, 3}, -1, 1));
    return Function([](Tp&, const P& p) { return ad::subsample(p("x"), 1, 2); });
  });
  for (ad::Direction dir : {ad::Direction::forward, ad::Direction::reverse}) {
    add_case(dir == ad::Direction::forward ? "gru_forward" : "gru_reverse", [dir](Rng& r, ParamSet<double>& ps) {
      const std::size_t B = 2, T = 5, D = 3, U = 4;
      Tensor<double> x = uniform_tensor(r, {B, T, D}, -1, 1);
      for (std::size_t t = 3; t < T; ++t) {
        for (std::size_t d = 0; d < D; ++d) x[(T + t) * D + d] = 0.0;
      }
      ps.add("x", x);
      ps.add("w_x", uniform_tensor(r, {D, 3 * U}, -0.8, 0.8));
      ps.add("w_h", uniform_tensor(r, {U, 3 * U}, -0.8, 0.8));
      ps.add("b", uniform_tensor(r, {3 * U}, -0.5, 0.5));
      return Function([dir](Tp&, const P& p) {
        const std::array<std::size_t, 2> lengths{5, 3};
        return ad::gru_layer(p("x"), std::span<const std::size_t>(lengths), p("w_x"), p("w_h"), p("b"), dir);
      });
    });
  }
  add_case("attention", [](Rng& r, ParamSet<double>& ps) {
    ps.add("H", uniform_tensor(r, {2, 4, 3}, -1, 1));
    ps.add("w", uniform_tensor(r, {3, 1}, -1, 1));
    ps.add("b", uniform_tensor(r, {1}, -1, 1));
    const std::array<std::size_t, 2> lengths{4, 2};
    Tensor<double> mask = time_mask<double>(lengths, 4);
    return Function([mask](Tp&, const P& p) { return attention(p("H"), p("w"), p("b"), mask); });
  });
  add_case("distribute", [](Rng& r, ParamSet<double>& ps) {
    ps.add("H", uniform_tensor(r, {2, 4, 3}, -1, 1));
    ps.add("W", uniform_tensor(r, {3, 3}, -1, 1));
    ps.add("b", uniform_tensor(r, {3}, -1, 1));
    return Function([](Tp&, const P& p) { return distribute(p("H"), p("W"), p("b")); });
  });
  add_case("context", [](Rng& r, ParamSet<double>& ps) {
    ps.add("H", uniform_tensor(r, {2, 4, 3}, -1, 1));
    ps.add("alpha", uniform_tensor(r, {2, 4}, 0, 1));
    ps.add("delta", uniform_tensor(r, {2, 4, 2}, 0, 1));
    return Function([](Tp&, const P& p) { return context(p("H"), p("alpha"), p("delta")); });
  });
  add_case("squash_layer", [](Rng& r, ParamSet<double>& ps) {
    ps.add("Q", uniform_tensor(r, {2, 3, 4}, -1, 1));
    ps.add("W", uniform_tensor(r, {4, 3}, -1, 1));
    return Function([](Tp&, const P& p) { return squash_layer(p("Q"), p("W")); });
  });
  add_case("predict", [](Rng& r, ParamSet<double>& ps) {
    ps.add("S", uniform_tensor(r, {2, 3, 4}, -1, 1));
    ps.add("W", uniform_tensor(r, {3, 4, 2 * 2}, -1, 1));
    return Function([](Tp&, const P& p) { return predict(p("S"), p("W"), 2); });
  });
  add_case("dynamic_routing", [](Rng& r, ParamSet<double>& ps) {
    ps.add("P", uniform_tensor(r, {2, 3, 4, 2}, -1, 1));
    ps.add("B", uniform_tensor(r, {3, 4}, -1, 1));
    return Function([](Tp&, const P& p) { return dynamic_routing(p("P"), p("B"), 3).O; });
  });
  add_case("routing_coupling", [](Rng& r, ParamSet<double>& ps) {
    ps.add("P", uniform_tensor(r, {2, 3, 4, 2}, -1, 1));
    ps.add("B", uniform_tensor(r, {3, 4}, -1, 1));
    return Function([](Tp&, const P& p) { return dynamic_routing(p("P"), p("B"), 3).C; });
  });
  add_case("label_probs", [](Rng& r, ParamSet<double>& ps) {
    ps.add("O", uniform_tensor(r, {2, 3, 4}, -1, 1));
    return Function([](Tp&, const P& p) { return label_probs(p("O")); });
  });
  add_case("margin_loss", [](Rng& r, ParamSet<double>& ps) {
    ps.add("l", unit_tensor_avoiding(r, {3, 5}, {0.1, 0.9}, 0.01));
    Tensor<double> t = binary_targets(r, 3, 5);
    return Function([t](Tp&, const P& p) { return margin_loss(p("l"), t); });
  });
  add_case("baseline_loss", [](Rng& r, ParamSet<double>& ps) {
    ps.add("l", unit_tensor_avoiding(r, {3, 5}, {}, 0.0));
    Tensor<double> t = binary_targets(r, 3, 5);
    return Function([t](Tp&, const P& p) { return baseline_loss(p("l"), t); });
  });
  add_case("encoder", [mcfg](Rng& r, ParamSet<double>& ps) {
    ps = ParamSet<double>();
    ParamSet<double> full = perturbed_model(ModelKind::capsule, mcfg, r);
    for (auto& e : full.entries()) {
      if (e.name.rfind("encoder.", 0) == 0) ps.add(e.name, e.param.value);
    }
    Tensor<double> x = uniform_tensor(r, {2, 6, mcfg.input_dim}, -1, 1);
    for (std::size_t d = 0; d < 2 * mcfg.input_dim; ++d) x[(6 + 4) * mcfg.input_dim + d] = 0.0;
    return Function([mcfg, x](Tp& tape, const P& p) {
      const std::array<std::size_t, 2> lengths{6, 4};
      return encode(p, mcfg, tape.constant(x), lengths).H;
    });
  });
  add_case("capsule_model", [mcfg](Rng& r, ParamSet<double>& ps) { return model_case(ModelKind::capsule, mcfg, r, ps); });
  add_case("baseline_model", [mcfg](Rng& r, ParamSet<double>& ps) { return model_case(ModelKind::baseline, mcfg, r, ps); });
  return cases;
}

}  // namespace

double max_relative_error(ParamSet<double>& params, const Function& f, const Settings& settings) {
  Shape out_shape;
  {
    ad::Tape<double> probe;
    BoundParams<double> bound(probe, params, false);
    out_shape = f(probe, bound).shape();
  }
  const Tensor<double> w = projection(out_shape, settings.projection_seed);

  params.zero_grad();
  {
    ad::Tape<double> tape;
    BoundParams<double> bound(tape, params);
    ad::Var<double> out = f(tape, bound);
    tape.backward(ad::sum_all(ad::mul_const(out, w)));
  }

  const double h = settings.step;
  double worst = 0.0;
  for (auto& e : params.entries()) {
    Tensor<double>& value = e.param.value;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double orig = value[i];
      value[i] = orig + h;
      const double up = eval_loss(params, f, w);
      value[i] = orig - h;
      const double down = eval_loss(params, f, w);
      value[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = e.param.grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), settings.floor});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.input_dim = 3;
  c.encoder_layers = 2;
  c.encoder_units = 3;
  c.n_hidden_caps = 2;
  c.hidden_cap_dim = 3;
  c.output_cap_dim = 2;
  c.n_labels = 3;
  c.routing_iters = 3;
  c.baseline_hidden = 4;
  return c;
}

ad::Var<double> corrupt_backward(ad::Var<double> x) {
  ad::Tape<double>& tape = x.tape();
  const std::size_t xi = x.id();
  return tape.record(x.value(), {xi}, [xi](ad::Tape<double>& tp, const Tensor<double>& g) {
    Tensor<double> scaled = g;
    for (double& v : scaled.data()) v *= 1.5;
    tp.accumulate(xi, scaled);
  });
}

std::vector<std::string> case_names() {
  std::vector<std::string> names;
  for (const Case& c : build_cases(tiny_model())) names.push_back(c.name);
  return names;
}

std::vector<CaseResult> run(const Options& options) {
  options.model.validate();
  const std::vector<Case> cases = build_cases(options.model);
  for (const std::string& name : options.only) {
    if (std::none_of(cases.begin(), cases.end(), [&](const Case& c) { return c.name == name; })) {
      throw std::invalid_argument("unknown gradcheck case " + name);
    }
  }
  if (!options.corrupt.empty() &&
      std::none_of(cases.begin(), cases.end(), [&](const Case& c) { return c.name == options.corrupt; })) {
    throw std::invalid_argument("unknown gradcheck case " + options.corrupt);
  }
  std::vector<CaseResult> results;
  for (std::size_t k = 0; k < cases.size(); ++k) {
    const Case& c = cases[k];
    if (!options.only.empty() && std::find(options.only.begin(), options.only.end(), c.name) == options.only.end()) {
      continue;
    }
    CaseResult res;
    res.name = c.name;
    for (std::size_t s = 0; s < options.seeds; ++s) {
      Rng rng(derive_seed(derive_seed(options.root_seed, k), s));
      ParamSet<double> ps;
      Function f = c.setup(rng, ps);
      if (c.name == options.corrupt) {
        f = [inner = std::move(f)](ad::Tape<double>& tape, const BoundParams<double>& p) {
          return corrupt_backward(inner(tape, p));
        };
      }
      Settings settings = options.settings;
      settings.projection_seed = rng.bits();
      res.max_rel_error = std::max(res.max_rel_error, max_relative_error(ps, f, settings));
      ++res.trials;
    }
    res.passed = res.max_rel_error < options.tolerance;
    results.push_back(res);
  }
  return results;
}

std::string format_report(std::span<const CaseResult> results, double tolerance) {
  std::ostringstream os;
  char buf[160];
  for (const CaseResult& r : results) {
    std::snprintf(buf, sizeof buf, "%-18s trials=%-3zu max_rel_err=%.3e  %s\n", r.name.c_str(), r.trials,
                  r.max_rel_error, r.max_rel_error < tolerance ? "PASS" : "FAIL");
    os << buf;
  }
  return os.str();
}

}  // namespace capslu::gradcheck
