#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "reference_transmix.hpp"
#include "transmix/mixers.hpp"

using namespace transmix;

namespace {

TransMixDims small_dims(Index n, Index dm, Index heads, Index layers = 2) {
  TransMixDims d;
  d.n_agents = n;
  d.state_dim = 3;
  d.history_dim = 2;
  d.layers = layers;
  d.heads = heads;
  d.model_dim = dm;
  d.state_tokens = 2;
  d.skip_dim = 3;
  return d;
}

template <typename Params>
void zero_all(Params& p) {
  p.visit([](const std::string&, TensorD& t) { t.data().setZero(); });
}

struct Sample {
  TensorD q, hist, state;
};

Sample random_sample(Index n, Index dh, Index s, std::mt19937_64& rng) {
  Sample x{TensorD({1, n}), TensorD({n, dh}), TensorD({1, s})};
  fill_uniform(x.q, 1.0, rng);
  fill_uniform(x.hist, 1.0, rng);
  fill_uniform(x.state, 1.0, rng);
  return x;
}

double transmix_value(TransMixParams<double>& p, const Sample& x) {
  Tape<double> t(false);
  MixerInput<double> in{t.constant(x.q), t.constant(x.hist), t.constant(x.state)};
  return transmix_forward(t, p, in).value().item();
}

double reference_value(const TransMixParams<double>& p, const Sample& x) {
  const auto m = reference::from_params(p);
  reference::Vec s = reference::to_vec(x.state), q = reference::to_vec(x.q);
  return reference::forward(m, s, q, reference::to_mat(x.hist));
}

}  // namespace

TEST_CASE("vdn sums agent values") {
  Tape<double> t;
  CHECK(vdn_forward(t.constant(TensorD({1, 3}, {1, 2, 3}))).value().item() == 6.0);
  CHECK(vdn_forward(t.constant(TensorD({1, 1}, {-2.75}))).value().item() == -2.75);
  CHECK(vdn_forward(t.constant(TensorD({1, 2}, {-5, 5}))).value().item() == 0.0);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 200; ++i) {
    TensorD q({4, 5});
    fill_uniform(q, 10.0, rng);
    auto y = vdn_forward(t.constant(q)).value();
    for (Index r = 0; r < 4; ++r) {
      double acc = 0.0;
      for (Index c = 0; c < 5; ++c) acc += q[r * 5 + c];
      CHECK(y[r] - acc == 0.0);
    }
  }
}

TEST_CASE("qmix with zero hypernetworks outputs zero") {
  QmixParams<double> p(QmixDims{2, 3, 4});
  Tape<double> t(false);
  MixerInput<double> in{t.constant(TensorD({1, 2}, {0.7, -1.3})), {}, t.constant(TensorD({1, 3}, {1, 2, 3}))};
  CHECK(qmix_forward(t, p, in).value().item() == 0.0);
}

TEST_CASE("qmix with unit mixing weights") {
  QmixParams<double> p(QmixDims{2, 2, 2});
  p.hyper_w1.bias.data().setOnes();
  p.hyper_w2.bias.data().setOnes();
  Tape<double> t(false);
  MixerInput<double> in{t.constant(TensorD({1, 2}, {1, 1})), {}, t.constant(TensorD({1, 2}, {0.3, -0.4}))};
  // two hidden units, each elu(1 + 1) = 2
  CHECK(qmix_forward(t, p, in).value().item() == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("qmix rejects a state of the wrong width") {
  QmixParams<double> p(QmixDims{2, 3, 4});
  Tape<double> t(false);
  MixerInput<double> in{t.constant(TensorD({1, 2})), {}, t.constant(TensorD({1, 2}))};
  CHECK_THROWS_AS(qmix_forward(t, p, in), ShapeError);
}

TEST_CASE("qmix is monotone in every agent value") {
  std::mt19937_64 rng(17);
  double worst = 1.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Index n = 2 + trial % 3;
    QmixParams<double> p(QmixDims{n, 3, 4});
    p.init(rng);
    TensorD q({1, n}), s({1, 3});
    fill_uniform(q, 2.0, rng);
    fill_uniform(s, 2.0, rng);
    Tape<double> t;
    auto qv = t.variable(q);
    auto y = qmix_forward(t, p, MixerInput<double>{qv, {}, t.constant(s)});
    t.backward(y);
    worst = std::min(worst, t.grad(qv).minCoeff());
  }
  CHECK(worst >= -1e-9);
}

TEST_CASE("additive attention pools tokens convexly") {
  Tape<double> t(false);
  auto w = t.constant(TensorD({2}, {0.3, -0.8}));
  auto single = additive_attention(t.constant(TensorD({1, 2}, {0.4, -1.1})), w);
  CHECK(single.value()[0] == 0.4);
  CHECK(single.value()[1] == -1.1);
  auto same = additive_attention(t.constant(TensorD({2, 2}, {0.4, -1.1, 0.4, -1.1})), w);
  CHECK(same.value()[0] == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(same.value()[1] == doctest::Approx(-1.1).epsilon(1e-15));
  auto mixed = additive_attention(t.constant(TensorD({2, 2}, {1, 0, 0, 1})), t.constant(TensorD({2}, {1, 0})));
  // softmax([1/sqrt(2), 0])
  CHECK(mixed.value()[0] == doctest::Approx(0.6697615493266569).epsilon(1e-14));
  CHECK(mixed.value()[1] == doctest::Approx(0.3302384506733431).epsilon(1e-14));
}

TEST_CASE("transmix layer with zero weights is the residual path") {
  auto d = small_dims(3, 4, 2);
  TransMixLayerParams<double> p(d);
  std::mt19937_64 rng(3);
  TensorD s({2, 3}), q({2, 3}), v({6, 4});
  fill_uniform(s, 1.0, rng);
  fill_uniform(q, 1.0, rng);
  fill_uniform(v, 1.0, rng);
  Tape<double> t(false);
  auto out = transmix_layer(t, d, p, t.constant(s), t.constant(q), t.constant(v));
  CHECK((out.tokens.value().data() - v.data()).abs().maxCoeff() == 0.0);
  CHECK(out.state_summary.value().data().abs().maxCoeff() == 0.0);
}

TEST_CASE("transmix layer with one agent reduces to element-wise products") {
  auto d = small_dims(1, 4, 2);
  TransMixParams<double> full(d);
  std::mt19937_64 rng(8);
  full.init(rng);
  auto& p = full.layers[0];
  TensorD s({1, 3}), q({1, 1}, {0.6}), v({1, 4});
  fill_uniform(s, 1.0, rng);
  fill_uniform(v, 1.0, rng);
  Tape<double> t(false);
  auto out = transmix_layer(t, d, p, t.constant(s), t.constant(q), t.constant(v));
  const auto& g = out.state_summary.value();
  Eigen::RowVectorXd key(4), gated(4);
  for (int c = 0; c < 4; ++c) {
    key[c] = g[c] * (0.6 * p.q_embed.weight[c] + p.q_embed.bias[c]);
    gated[c] = key[c] * v[c];
  }
  Eigen::RowVectorXd expect = gated * p.out.weight.matrix() + p.out.bias.matrix() + v.matrix();
  for (int c = 0; c < 4; ++c) CHECK(out.tokens.value()[c] == doctest::Approx(expect[c]).epsilon(1e-14));
}

TEST_CASE("transmix layer golden trace, two agents, d_m = 2, one head") {
  TransMixDims d;
  d.n_agents = 2;
  d.state_dim = 2;
  d.history_dim = 1;
  d.layers = 2;
  d.heads = 1;
  d.model_dim = 2;
  d.state_tokens = 2;
  d.skip_dim = 1;
  TransMixLayerParams<double> p(d);
  p.state_embed.weight = TensorD({2, 4}, {0.1, 0.2, -0.3, 0.4, 0.5, -0.1, 0.2, 0.3});
  p.state_embed.bias = TensorD({1, 4}, {0.0, 0.1, -0.1, 0.2});
  p.q_embed.weight = TensorD({1, 2}, {0.5, -0.5});
  p.q_embed.bias = TensorD({1, 2}, {0.1, 0.2});
  p.attn_state = TensorD({1, 2}, {1.0, -1.0});
  p.attn_key = TensorD({1, 2}, {0.5, 0.5});
  p.out.weight = TensorD({2, 2}, {0.2, 0.1, -0.1, 0.3});
  p.out.bias = TensorD({1, 2}, {0.05, -0.05});
  Tape<double> t(false);
  auto out = transmix_layer(t, d, p, t.constant(TensorD({1, 2}, {1.0, 2.0})), t.constant(TensorD({1, 2}, {0.5, -1.0})),
                            t.constant(TensorD({2, 2}, {0.3, -0.2, 0.1, 0.4})));
  // frozen from an independent numpy evaluation
  const double g[] = {0.9082987096252076, 0.29170129037479237};
  const double r[] = {0.35202214912274987, -0.25500054750215917, 0.14666630166522726, 0.3603563949596818};
  for (int i = 0; i < 2; ++i) CHECK(std::abs(out.state_summary.value()[i] - g[i]) <= 1e-12);
  for (int i = 0; i < 4; ++i) CHECK(std::abs(out.tokens.value()[i] - r[i]) <= 1e-12);
}

TEST_CASE("transmix layer matches the straight-line oracle") {
  std::mt19937_64 rng(41);
  for (Index dm : {2, 4}) {
    for (Index heads : {Index(1), Index(2)}) {
      auto d = small_dims(2, dm, heads);
      TransMixParams<double> full(d);
      full.init(rng);
      const auto ref = reference::from_params(full);
      TensorD s({1, 3}), q({1, 2}), v({2, dm});
      fill_uniform(s, 1.0, rng);
      fill_uniform(q, 1.0, rng);
      fill_uniform(v, 1.0, rng);
      Tape<double> t(false);
      auto out = transmix_layer(t, d, full.layers[0], t.constant(s), t.constant(q), t.constant(v));
      auto expect = reference::layer(ref, ref.layers[0], reference::to_vec(s), reference::to_vec(q), reference::to_mat(v));
      for (Index i = 0; i < 2; ++i)
        for (Index j = 0; j < dm; ++j) CHECK(std::abs(out.tokens.value()[i * dm + j] - expect.tokens[i][j]) <= 1e-12);
      for (Index j = 0; j < dm; ++j) CHECK(std::abs(out.state_summary.value()[j] - expect.summary[j]) <= 1e-12);
    }
  }
}

TEST_CASE("transmix forward with zero parameters is zero") {
  TransMixParams<double> p(small_dims(3, 4, 2));
  std::mt19937_64 rng(2);
  auto x = random_sample(3, 2, 3, rng);
  CHECK(transmix_value(p, x) == 0.0);
}

TEST_CASE("transmix forward golden trace, two agents, two layers, d_m = 4, two heads") {
  std::mt19937_64 rng(1234);
  TransMixParams<double> p(small_dims(2, 4, 2, 2));
  p.init(rng);
  for (int k = 0; k < 20; ++k) {
    auto x = random_sample(2, 2, 3, rng);
    CHECK(std::abs(transmix_value(p, x) - reference_value(p, x)) <= 1e-12);
  }
}

TEST_CASE("transmix is invariant to agent order") {
  std::mt19937_64 rng(77);
  const Index n = 4;
  for (int trial = 0; trial < 100; ++trial) {
    TransMixParams<double> p(small_dims(n, 4, 2, 2 + trial % 3));
    p.init(rng);
    auto x = random_sample(n, 2, 3, rng);
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Sample y = x;
    for (Index i = 0; i < n; ++i) {
      y.q[i] = x.q[perm[i]];
      y.hist.matrix().row(i) = x.hist.matrix().row(perm[i]);
    }
    CHECK(std::abs(transmix_value(p, x) - transmix_value(p, y)) <= 1e-9);
  }
}

TEST_CASE("transmix admits negative dQ_tot/dq_i") {
  std::mt19937_64 rng(5);
  bool found = false;
  for (int trial = 0; trial < 1000 && !found; ++trial) {
    TransMixParams<double> p(small_dims(2, 4, 2));
    p.init(rng);
    auto x = random_sample(2, 2, 3, rng);
    Tape<double> t;
    auto qv = t.variable(x.q);
    auto y = transmix_forward(t, p, MixerInput<double>{qv, t.constant(x.hist), t.constant(x.state)});
    t.backward(y);
    found = t.grad(qv).minCoeff() < 0.0;
  }
  CHECK(found);
}

TEST_CASE("mixer gradients match finite differences") {
  std::mt19937_64 rng(9);
  SUBCASE("qmix") {
    QmixParams<double> p(QmixDims{3, 3, 4});
    p.init(rng);
    TensorD q({2, 3}), s({2, 3}), w({2, 1});
    fill_uniform(q, 1.0, rng);
    fill_uniform(s, 1.0, rng);
    fill_uniform(w, 1.0, rng);
    std::vector<TensorD*> leaves{&q, &s};
    p.visit([&](const std::string&, TensorD& t) { leaves.push_back(&t); });
    auto rep = grad_check<double>(
        [&](Tape<double>& t) {
          return sum_all(qmix_forward(t, p, MixerInput<double>{t.param(q), {}, t.param(s)}) * t.constant(w));
        },
        leaves, 1e-5, 1e-4);
    CHECK_MESSAGE(rep.pass, rep.max_rel_err);
  }
  SUBCASE("transmix") {
    TransMixParams<double> p(small_dims(2, 4, 2, 3));
    p.init(rng);
    TensorD q({2, 2}), h({4, 2}), s({2, 3}), w({2, 1});
    fill_uniform(q, 1.0, rng);
    fill_uniform(h, 1.0, rng);
    fill_uniform(s, 1.0, rng);
    fill_uniform(w, 1.0, rng);
    std::vector<TensorD*> leaves{&q, &h, &s};
    p.visit([&](const std::string&, TensorD& t) { leaves.push_back(&t); });
    auto rep = grad_check<double>(
        [&](Tape<double>& t) {
          MixerInput<double> in{t.param(q), t.param(h), t.param(s)};
          return sum_all(transmix_forward(t, p, in) * t.constant(w));
        },
        leaves, 1e-5, 1e-4);
    CHECK_MESSAGE(rep.pass, rep.max_rel_err);
  }
}

TEST_CASE("transmix rejects bad configurations") {
  auto d = small_dims(2, 6, 4);
  CHECK_THROWS_AS(TransMixParams<double>{d}, ShapeError);
  auto deep = small_dims(2, 4, 2, 7);
  CHECK_THROWS_AS(TransMixParams<double>{deep}, ShapeError);
}
