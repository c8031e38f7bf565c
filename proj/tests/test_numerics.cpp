#include <doctest.h>

#include <cmath>
#include <random>

#include "transmix/numerics.hpp"

using namespace transmix;

namespace {

TensorD row(std::initializer_list<double> v) { return TensorD({static_cast<Index>(v.size())}, v); }

}  // namespace

TEST_CASE("matmul of a row by a column") {
  Tape<double> t;
  auto a = t.constant(TensorD({1, 3}, {1, 2, 3}));
  auto b = t.constant(TensorD({3, 1}, {1, 0, 2}));
  auto y = matmul(a, b);
  CHECK(y.shape() == Shape{1, 1});
  CHECK(y.value()[0] == 7.0);
}

TEST_CASE("softmax of equal logits is uniform") {
  Tape<double> t;
  auto y = softmax(t.constant(row({0, 0})), 0);
  CHECK(y.value()[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(y.value()[1] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("elu at -1") {
  Tape<double> t;
  auto y = elu(t.constant(row({-1.0, 2.0})));
  // e^-1 - 1, evaluated independently
  CHECK(y.value()[0] == doctest::Approx(-0.6321205588285577).epsilon(1e-15));
  CHECK(y.value()[1] == 2.0);
}

TEST_CASE("shape errors name the op and both shapes") {
  Tape<double> t;
  auto a = t.constant(TensorD({2, 3}));
  auto b = t.constant(TensorD({2, 3}));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, t.constant(TensorD({3, 2}))), ShapeError);
  CHECK_THROWS_AS(softmax(a, 2), ShapeError);
  CHECK_THROWS_AS(reshape(a, {4}), ShapeError);
}

TEST_CASE("broadcast of length-1 axes") {
  Tape<double> t;
  auto a = t.constant(TensorD({2, 1, 3}, {1, 2, 3, 4, 5, 6}));
  auto b = t.constant(TensorD({1, 2, 1}, {10, 20}));
  auto y = add(a, b);
  CHECK(y.shape() == Shape{2, 2, 3});
  const double expect[] = {11, 12, 13, 21, 22, 23, 14, 15, 16, 24, 25, 26};
  for (int i = 0; i < 12; ++i) CHECK(y.value()[i] == expect[i]);
}

TEST_CASE("backward of sum of squares") {
  TensorD x = row({1, -2, 3});
  x.set_requires_grad(true);
  Tape<double> t;
  auto xv = t.param(x);
  t.backward(sum_all(xv * xv));
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == -4.0);
  CHECK(x.grad()[2] == 6.0);
}

TEST_CASE("constant-only loss leaves gradients at zero") {
  TensorD x = row({1, 2});
  x.set_requires_grad(true);
  Tape<double> t;
  t.param(x);
  auto c = t.constant(TensorD::scalar(5.0));
  t.backward(c);
  CHECK(x.grad().abs().maxCoeff() == 0.0);
}

TEST_CASE("gradient of sum(softmax(x)) vanishes") {
  TensorD x = row({0.3, -1.2, 2.0, 0.1});
  auto f = [&](Tape<double>& t) { return sum_all(softmax(t.param(x), 0)); };
  // both sides are ~0, so compare the finite-difference value absolutely
  auto rep = grad_check<double>(f, {&x}, 1e-5, 1e-6);
  CHECK(std::abs(rep.worst_numeric) < 1e-9);
  x.set_requires_grad(true);
  x.zero_grad();
  Tape<double> t;
  t.backward(f(t));
  CHECK(x.grad().abs().maxCoeff() < 1e-15);
}

TEST_CASE("backward rejects non-scalar losses and second passes") {
  TensorD x = row({1, 2});
  x.set_requires_grad(true);
  Tape<double> t;
  auto v = t.param(x);
  CHECK_THROWS_AS(t.backward(v), ShapeError);
  auto l = sum_all(v);
  t.backward(l);
  CHECK_THROWS_AS(t.backward(l), std::logic_error);
}

TEST_CASE("fan-out accumulates path gradients") {
  TensorD x1 = row({0.5, -1.5}), x2 = row({0.5, -1.5});
  x1.set_requires_grad(true);
  x2.set_requires_grad(true);
  Tape<double> t;
  auto a = t.param(x1);
  t.backward(sum_all(tanh(a + a)));
  Tape<double> u;
  u.backward(sum_all(tanh(scale(u.param(x2), 2.0))));
  CHECK(x1.grad()[0] == x2.grad()[0]);
  CHECK(x1.grad()[1] == x2.grad()[1]);
}

TEST_CASE("non-recording tape keeps values only") {
  TensorD x = row({1, 2});
  x.set_requires_grad(true);
  Tape<double> t(false);
  auto y = sum_all(t.param(x) * t.param(x));
  CHECK(y.value().item() == 5.0);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("adam first step moves by lr against the gradient sign") {
  TensorD p = TensorD::scalar(0.0);
  p.set_requires_grad(true);
  AdamState<double> st({}, {&p});
  p.grad()[0] = 1.0;
  adam_step<double>({&p}, st);
  CHECK(st.t == 1);
  CHECK(p[0] == doctest::Approx(-0.001).epsilon(1e-7));
  p.grad()[0] = 1.0;
  adam_step<double>({&p}, st);
  // two-step value from hand-evaluated recurrences
  CHECK(p[0] == doctest::Approx(-0.001999999979999993).epsilon(1e-13));
}

TEST_CASE("adam with zero gradients leaves parameters in place") {
  std::mt19937_64 rng(3);
  TensorD p({4, 5});
  fill_uniform(p, 1.0, rng);
  const TensorD before = p;
  p.set_requires_grad(true);
  AdamState<double> st({}, {&p});
  for (int i = 0; i < 10; ++i) adam_step<double>({&p}, st);
  CHECK((p.data() - before.data()).abs().maxCoeff() <= 1e-12);
}

TEST_CASE("adam rejects non-finite gradients without updating") {
  TensorD p = row({1.0, 2.0});
  p.set_requires_grad(true);
  AdamState<double> st({}, {&p});
  p.grad()[1] = std::nan("");
  CHECK_THROWS_AS(adam_step<double>({&p}, st), NumericalError);
  CHECK(p[0] == 1.0);
  CHECK(st.t == 0);
}

TEST_CASE("grad_check on a square and a constant") {
  TensorD th = TensorD::scalar(3.0);
  auto rep = grad_check<double>([&](Tape<double>& t) { auto v = t.param(th); return sum_all(v * v); }, {&th}, 1e-5,
                                1e-6);
  CHECK(rep.pass);
  CHECK(rep.worst_analytic == 6.0);
  CHECK(rep.worst_numeric == doctest::Approx(6.0).epsilon(1e-8));

  auto flat = grad_check<double>(
      [&](Tape<double>& t) {
        t.param(th);
        return t.constant(TensorD::scalar(2.0));
      },
      {&th}, 1e-5, 1e-6);
  CHECK(flat.pass);
  CHECK(flat.max_rel_err == 0.0);
}

TEST_CASE("softmax rows are normalised") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    TensorD x({3, 5, 2});
    fill_uniform(x, 20.0, rng);
    Tape<double> t(false);
    auto y = softmax(t.constant(x), 1).value();
    for (Index o = 0; o < 3; ++o) {
      for (Index i = 0; i < 2; ++i) {
        double s = 0;
        for (Index e = 0; e < 5; ++e) {
          const double v = y[(o * 5 + e) * 2 + i];
          CHECK(v >= 0.0);
          s += v;
        }
        CHECK(std::abs(s - 1.0) <= 1e-12);
      }
    }
  }
}

TEST_CASE("concat and reduction round trip") {
  Tape<double> t;
  auto a = t.constant(TensorD({2, 1}, {1, 2}));
  auto b = t.constant(TensorD({2, 2}, {3, 4, 5, 6}));
  auto c = concat<double>({a, b}, 1);
  CHECK(c.shape() == Shape{2, 3});
  const double expect[] = {1, 3, 4, 2, 5, 6};
  for (int i = 0; i < 6; ++i) CHECK(c.value()[i] == expect[i]);
  auto s = sum(c, 0);
  CHECK(s.shape() == Shape{3});
  CHECK(s.value()[0] == 3.0);
  auto m = mean(c, 1);
  CHECK(m.value()[1] == doctest::Approx(13.0 / 3.0));
}
