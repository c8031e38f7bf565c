#include <functional>

#include "transmix/harness.hpp"

namespace transmix {

namespace {

using Rng = std::mt19937_64;

Index dim(Rng& rng, Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); }

TensorD random(Shape s, Rng& rng, double bound = 1.0) {
  TensorD t(std::move(s));
  fill_uniform(t, bound, rng);
  return t;
}

/// Uniform values with magnitude at least `gap`, keeping kinked ops away from
/// their non-differentiable point.
TensorD away_from_zero(Shape s, Rng& rng, double gap = 0.05) {
  TensorD t = random(std::move(s), rng);
  for (Index i = 0; i < t.numel(); ++i) {
    if (std::abs(t[i]) < gap) t[i] = t[i] < 0 ? -gap : gap;
  }
  return t;
}

/// Contracts an output against fixed random weights so every coordinate
/// carries a distinct, non-vanishing gradient.
Var<double> project(Tape<double>& t, const Var<double>& out, const TensorD& w) {
  return sum_all(out * t.constant(w));
}

struct Case {
  std::string name;
  /// Builds inputs, returns the loss closure and the tensors to perturb.
  std::function<GradCheckReport(Rng&, double)> run;
};

template <typename Build>
GradCheckReport check(std::vector<TensorD>& leaves, Build&& build, double tol) {
  std::vector<TensorD*> ptrs;
  for (auto& l : leaves) ptrs.push_back(&l);
  return grad_check<double>(
      [&](Tape<double>& t) {
        std::vector<Var<double>> v;
        for (auto& l : leaves) v.push_back(t.param(l));
        return build(t, v);
      },
      ptrs, 1e-5, tol);
}

GradCheckReport binary_case(Rng& rng, double tol, int op) {
  const Index m = dim(rng, 1, 4), n = dim(rng, 1, 4);
  // the second operand broadcasts along a random subset of axes
  const Shape sb{rng() % 2 ? m : 1, rng() % 2 ? n : 1};
  std::vector<TensorD> leaves{random({m, n}, rng), random(sb, rng)};
  const TensorD w = random({m, n}, rng);
  return check(
      leaves,
      [&](Tape<double>& t, const std::vector<Var<double>>& v) {
        auto y = op == 0 ? v[0] + v[1] : op == 1 ? v[0] - v[1] : v[0] * v[1];
        return project(t, y, w);
      },
      tol);
}

template <typename F>
GradCheckReport unary_case(Rng& rng, double tol, F&& f, bool kinked) {
  const Shape s{dim(rng, 1, 4), dim(rng, 1, 5)};
  std::vector<TensorD> leaves{kinked ? away_from_zero(s, rng) : random(s, rng, 2.0)};
  const TensorD w = random(s, rng);
  return check(
      leaves, [&](Tape<double>& t, const std::vector<Var<double>>& v) { return project(t, f(v[0]), w); }, tol);
}

std::vector<Case> kernel_cases() {
  std::vector<Case> cases;
  cases.push_back({"add", [](Rng& r, double tol) { return binary_case(r, tol, 0); }});
  cases.push_back({"sub", [](Rng& r, double tol) { return binary_case(r, tol, 1); }});
  cases.push_back({"mul", [](Rng& r, double tol) { return binary_case(r, tol, 2); }});
  cases.push_back({"scale", [](Rng& r, double tol) {
                     return unary_case(r, tol, [](const Var<double>& x) { return scale(x, -1.7); }, false);
                   }});
  cases.push_back({"shift", [](Rng& r, double tol) {
                     return unary_case(r, tol, [](const Var<double>& x) { return shift(x, 0.3) * x; }, false);
                   }});
  cases.push_back(
      {"relu", [](Rng& r, double tol) { return unary_case(r, tol, [](const auto& x) { return relu(x); }, true); }});
  cases.push_back(
      {"elu", [](Rng& r, double tol) { return unary_case(r, tol, [](const auto& x) { return elu(x); }, true); }});
  cases.push_back({"sigmoid",
                   [](Rng& r, double tol) { return unary_case(r, tol, [](const auto& x) { return sigmoid(x); }, false); }});
  cases.push_back(
      {"tanh", [](Rng& r, double tol) { return unary_case(r, tol, [](const auto& x) { return tanh(x); }, false); }});
  cases.push_back(
      {"abs", [](Rng& r, double tol) { return unary_case(r, tol, [](const auto& x) { return abs(x); }, true); }});
  cases.push_back({"softmax", [](Rng& r, double tol) {
                     const Index axis = static_cast<Index>(r() % 2);
                     return unary_case(r, tol, [axis](const auto& x) { return softmax(x, axis); }, false);
                   }});
  cases.push_back({"sum", [](Rng& rng, double tol) {
                     const Index a = dim(rng, 1, 3), b = dim(rng, 1, 3), c = dim(rng, 1, 3);
                     const Index axis = static_cast<Index>(rng() % 3);
                     std::vector<TensorD> leaves{random({a, b, c}, rng)};
                     Shape out{a, b, c};
                     out.erase(out.begin() + axis);
                     const TensorD w = random(out, rng);
                     const bool use_mean = rng() % 2;
                     return check(
                         leaves,
                         [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                           auto y = use_mean ? mean(v[0], axis) : sum(v[0], axis);
                           return project(t, y * y, w);
                         },
                         tol);
                   }});
  cases.push_back({"matmul", [](Rng& rng, double tol) {
                     const Index m = dim(rng, 1, 4), k = dim(rng, 1, 4), n = dim(rng, 1, 4);
                     std::vector<TensorD> leaves{random({m, k}, rng), random({k, n}, rng)};
                     const TensorD w = random({m, n}, rng);
                     return check(
                         leaves,
                         [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                           return project(t, matmul(v[0], v[1]), w);
                         },
                         tol);
                   }});
  cases.push_back({"linear", [](Rng& rng, double tol) {
                     const Index m = dim(rng, 1, 4), k = dim(rng, 1, 4), n = dim(rng, 1, 4);
                     std::vector<TensorD> leaves{random({m, k}, rng), random({k, n}, rng), random({1, n}, rng)};
                     const TensorD w = random({m, n}, rng);
                     return check(
                         leaves,
                         [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                           return project(t, linear(v[0], v[1], v[2]), w);
                         },
                         tol);
                   }});
  cases.push_back({"reshape_concat", [](Rng& rng, double tol) {
                     const Index m = dim(rng, 1, 3), a = dim(rng, 1, 3), b = dim(rng, 1, 3);
                     const Index axis = static_cast<Index>(rng() % 2);
                     std::vector<TensorD> leaves{random(axis ? Shape{m, a} : Shape{a, m}, rng),
                                                 random(axis ? Shape{m, b} : Shape{b, m}, rng)};
                     const Index total = m * (a + b);
                     const TensorD w = random({total}, rng);
                     return check(
                         leaves,
                         [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                           auto y = reshape(concat<double>({v[0], v[1]}, axis), {total});
                           return project(t, y * y, w);
                         },
                         tol);
                   }});
  cases.push_back({"additive_attention", [](Rng& rng, double tol) {
                     const Index n = dim(rng, 1, 3), T = dim(rng, 1, 4), H = dim(rng, 1, 3), dk = dim(rng, 1, 3);
                     std::vector<TensorD> leaves{random({n, T, H, dk}, rng), random({1, 1, H, dk}, rng, 2.0)};
                     const TensorD w = random({n, H, dk}, rng);
                     return check(
                         leaves,
                         [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                           return project(t, additive_attention_heads(v[0], v[1]), w);
                         },
                         tol);
                   }});
  return cases;
}

GradCheckReport agent_case(Rng& rng, double tol) {
  AgentDims d{dim(rng, 1, 4), dim(rng, 2, 5), dim(rng, 1, 3), dim(rng, 2, 6)};
  AgentParams<double> p(d);
  p.init(rng);
  const Index rows = d.n_agents * dim(rng, 1, 2);
  TensorD x = random({rows, d.input_dim()}, rng), h = random({rows, d.hidden_dim}, rng);
  const TensorD w = random({rows, d.n_actions}, rng);
  std::vector<TensorD*> leaves{&x, &h};
  p.visit([&](const std::string&, TensorD& t) { leaves.push_back(&t); });
  return grad_check<double>(
      [&](Tape<double>& t) {
        auto b = bind(t, p);
        auto s1 = agent_forward(b, t.param(x), t.param(h));
        auto s2 = agent_forward(b, t.param(x), s1.hidden);
        return project(t, s1.q + s2.q, w);
      },
      leaves, 1e-5, tol);
}

GradCheckReport mixer_case(Rng& rng, double tol, MixerKind kind) {
  const Index n = dim(rng, 1, 4), N = dim(rng, 1, 3), s = dim(rng, 1, 4), dh = dim(rng, 1, 4);
  MixerSpec spec;
  spec.kind = kind;
  spec.qmix_embed_dim = dim(rng, 1, 5);
  spec.layers = dim(rng, 2, 3);
  spec.heads = dim(rng, 1, 2);
  spec.model_dim = spec.heads * dim(rng, 1, 3);
  spec.state_tokens = dim(rng, 1, 3);
  spec.skip_dim = dim(rng, 1, 3);
  auto mixer = make_mixer(spec, n, s, dh);
  init_params(mixer, rng);
  TensorD q = random({N, n}, rng), hist = random({N * n, dh}, rng), st = random({N, s}, rng);
  const TensorD w = random({N, 1}, rng);
  std::vector<TensorD*> leaves{&q, &hist, &st};
  visit_params(mixer, [&](const std::string&, TensorD& t) { leaves.push_back(&t); });
  return grad_check<double>(
      [&](Tape<double>& t) {
        MixerInput<double> in{t.param(q), t.param(hist), t.param(st)};
        return project(t, mixer_forward(t, mixer, in), w);
      },
      leaves, 1e-5, tol);
}

}  // namespace

std::vector<GradCheckLine> run_gradcheck_suite(int trials, double tol, std::uint64_t seed) {
  if (trials < 1) throw std::invalid_argument("gradcheck: trials must be >= 1");
  auto cases = kernel_cases();
  cases.push_back({"gru_agent", agent_case});
  cases.push_back({"mixer_vdn", [](Rng& r, double tol) { return mixer_case(r, tol, MixerKind::kVdn); }});
  cases.push_back({"mixer_qmix", [](Rng& r, double tol) { return mixer_case(r, tol, MixerKind::kQmix); }});
  cases.push_back({"mixer_transmix", [](Rng& r, double tol) { return mixer_case(r, tol, MixerKind::kTransMix); }});

  std::vector<GradCheckLine> lines;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    Rng rng(seed + 7919 * c);
    GradCheckLine line{cases[c].name, trials, 0.0, true};
    for (int k = 0; k < trials; ++k) {
      const auto rep = cases[c].run(rng, tol);
      line.max_rel_err = std::max(line.max_rel_err, rep.max_rel_err);
      line.pass = line.pass && rep.pass;
    }
    lines.push_back(line);
  }
  return lines;
}

}  // namespace transmix
