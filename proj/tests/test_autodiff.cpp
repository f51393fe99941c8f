#include <doctest.h>

#include <cmath>

#include "poseadapt/autodiff.hpp"

using namespace poseadapt;
using ad::Matrix;
using ad::Parameter;
using ad::Tape;
using ad::Var;

namespace {

Matrix row3(double a, double b, double c) {
  Matrix m(1, 3);
  m << a, b, c;
  return m;
}

}  // namespace

TEST_CASE("forward op values") {
  Tape tape;
  const Var r = tape.relu(tape.constant(row3(-1, 0, 2)));
  CHECK(r.value()(0, 0) == 0.0);
  CHECK(r.value()(0, 1) == 0.0);
  CHECK(r.value()(0, 2) == 2.0);

  const Var d = tape.l1_distance(tape.constant(row3(1, 2, 3)), tape.constant(row3(1, 2, 3)));
  CHECK(d.value()(0, 0) == 0.0);

  Matrix logits(1, 2);
  logits << 0.0, 0.0;
  const Var ce = tape.softmax_cross_entropy(tape.constant(logits), {0});
  CHECK(std::abs(ce.value()(0, 0) - std::log(2.0)) < 1e-12);

  Matrix logits4(1, 4);
  logits4.setZero();
  const Var ce4 = tape.softmax_cross_entropy(tape.constant(logits4), {2});
  CHECK(std::abs(ce4.value()(0, 0) - std::log(4.0)) < 1e-12);
}

TEST_CASE("backward: simple derivatives") {
  {
    Parameter x("x", 1, 1);
    x.value(0, 0) = 3.0;
    Tape tape;
    Var v = tape.leaf(x);
    tape.backward(tape.mul(v, v));
    CHECK(x.grad(0, 0) == doctest::Approx(6.0).epsilon(1e-15));
  }
  {
    Parameter x("x", 1, 2);
    x.value << -1.0, 2.0;
    Tape tape;
    tape.backward(tape.sum(tape.relu(tape.leaf(x))));
    CHECK(x.grad(0, 0) == 0.0);
    CHECK(x.grad(0, 1) == 1.0);
  }
}

TEST_CASE("backward: non-scalar loss rejected, shape errors are named") {
  Tape tape;
  Var v = tape.constant(row3(1, 2, 3));
  CHECK_THROWS_AS(tape.backward(v), std::invalid_argument);

  Matrix a(2, 3), b(2, 2);
  a.setZero();
  b.setZero();
  CHECK_THROWS_WITH_AS(tape.matmul(tape.constant(a), tape.constant(a)),
                       "matmul: incompatible shapes [2x3] and [2x3]", std::invalid_argument);
  CHECK_THROWS_AS(tape.add(tape.constant(a), tape.constant(b)), std::invalid_argument);
}

TEST_CASE("non-finite values abort with the op name") {
  Tape tape;
  Matrix big(1, 1);
  big << 1000.0;
  CHECK_THROWS_WITH_AS(tape.exp(tape.constant(big)),
                       "non-finite value produced by op 'exp'", std::runtime_error);
}

TEST_CASE("random MLP gradients match central finite differences") {
  Rng rng = Rng::stream(99, {rng_tag::kParamInit});
  Parameter w1("w1", 5, 8), b1("b1", 1, 8), w2("w2", 8, 3), b2("b2", 1, 3), s("s", 1, 1);
  for (Parameter* p : {&w1, &w2}) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = rng.uniform(-0.5, 0.5);
  }
  s.value(0, 0) = 0.3;
  Matrix x(4, 5), target(4, 3);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1, 1);
  for (Eigen::Index i = 0; i < target.size(); ++i) target.data()[i] = rng.uniform(-1, 1);

  const auto build = [&](Tape& tape) {
    Var h = tape.relu(tape.add_bias(tape.matmul(tape.constant(x), tape.leaf(w1)), tape.leaf(b1)));
    Var y = tape.add_bias(tape.matmul(h, tape.leaf(w2)), tape.leaf(b2));
    Var l1 = tape.mean(tape.l1_distance(y, tape.constant(target)));
    return tape.add(tape.mul(l1, tape.exp(tape.negate(tape.leaf(s)))), tape.leaf(s));
  };
  const auto report = ad::check_gradients({&w1, &b1, &w2, &b2, &s}, build, 7, 20);
  CAPTURE(report.worst_coordinate);
  CHECK(report.max_rel_err < 1e-5);
  CHECK(report.checked > 40);
}

TEST_CASE("softmax cross entropy gradients match finite differences") {
  Rng rng = Rng::stream(123, {rng_tag::kParamInit});
  Parameter w("w", 4, 3);
  for (Eigen::Index i = 0; i < w.value.size(); ++i) w.value.data()[i] = rng.uniform(-1, 1);
  Matrix x(6, 4);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1, 1);
  const std::vector<int> labels{0, 2, 1, 1, 0, 2};

  const auto build = [&](Tape& tape) {
    Var logits = tape.matmul(tape.constant(x), tape.leaf(w));
    return tape.mean(tape.softmax_cross_entropy(logits, labels));
  };
  const auto report = ad::check_gradients({&w}, build, 3, 12);
  CAPTURE(report.worst_coordinate);
  CHECK(report.max_rel_err < 1e-5);
}

TEST_CASE("l1 subgradient at zero is zero") {
  Parameter a("a", 1, 3);
  a.value << 1.0, 2.0, 3.0;
  Tape tape;
  Var d = tape.l1_distance(tape.leaf(a), tape.constant(row3(1, 2, 3)));
  tape.backward(tape.sum(d));
  CHECK(a.grad.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gradient reversal") {
  Parameter x("x", 1, 3);
  x.value << 0.5, -0.25, 2.0;

  {
    Tape tape;
    Var v = tape.gradient_reversal(tape.leaf(x), 0.7);
    for (int j = 0; j < 3; ++j) CHECK(v.value()(0, j) == x.value(0, j));  // identity forward
  }
  {
    Tape tape;
    tape.backward(tape.sum(tape.gradient_reversal(tape.leaf(x), 0.0)));
    CHECK(x.grad.cwiseAbs().maxCoeff() == 0.0);
    x.zero_grad();
  }
  {
    Tape tape;
    tape.backward(tape.sum(tape.gradient_reversal(tape.leaf(x), 1.0)));
    for (int j = 0; j < 3; ++j) CHECK(x.grad(0, j) == -1.0);
    x.zero_grad();
  }
  Tape tape;
  CHECK_THROWS_AS(tape.gradient_reversal(tape.leaf(x), -0.5), std::invalid_argument);
}

TEST_CASE("dropout: seeded mask in train mode, identity in eval mode") {
  Matrix x(4, 6);
  x.setConstant(1.0);
  {
    Tape tape;
    Rng rng = Rng::stream(5, {rng_tag::kDropout, 0});
    Var v = tape.dropout(tape.constant(x), 0.5, rng, /*train=*/true);
    int zeros = 0, doubled = 0;
    for (Eigen::Index i = 0; i < v.value().size(); ++i) {
      const double val = v.value().data()[i];
      CHECK((val == 0.0 || val == 2.0));
      (val == 0.0 ? zeros : doubled)++;
    }
    CHECK(zeros > 0);
    CHECK(doubled > 0);

    // same substream, same mask
    Tape tape2;
    Rng rng2 = Rng::stream(5, {rng_tag::kDropout, 0});
    Var v2 = tape2.dropout(tape2.constant(x), 0.5, rng2, true);
    CHECK((v.value() - v2.value()).cwiseAbs().maxCoeff() == 0.0);
  }
  {
    Tape tape;
    Rng rng(1);
    Var v = tape.dropout(tape.constant(x), 0.5, rng, /*train=*/false);
    CHECK((v.value() - x).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("concat, slice and scalar broadcasting backward") {
  Parameter a("a", 2, 3), b("b", 1, 3), s("s", 1, 1);
  a.value << 1, 2, 3, 4, 5, 6;
  b.value << -1, 0, 1;
  s.value(0, 0) = 0.5;
  const auto build = [&](Tape& tape) {
    Var cat = tape.concat_rows(tape.leaf(a), tape.leaf(b));
    Var sliced = tape.slice_cols(cat, 1, 2);
    Var scaled = tape.mul(sliced, tape.leaf(s));
    Var shifted = tape.add(scaled, tape.leaf(s));
    return tape.mean(tape.exp(tape.scale(shifted, 0.3)));
  };
  const auto report = ad::check_gradients({&a, &b, &s}, build, 11, 20);
  CAPTURE(report.worst_coordinate);
  CHECK(report.max_rel_err < 1e-5);
}

TEST_CASE("adam update") {
  // zero gradient leaves parameters unchanged
  {
    Matrix v(2, 2);
    v << 1, 2, 3, 4;
    const Matrix before = v;
    ad::AdamState st;
    ad::adam_update(v, Matrix::Zero(2, 2), st, 1e-2);
    CHECK((v - before).cwiseAbs().maxCoeff() == 0.0);
  }
  // first-step magnitude: |delta| = lr * g / (|g| + eps)
  {
    Matrix v(1, 1);
    v << 0.0;
    Matrix g(1, 1);
    g << 0.37;
    ad::AdamState st;
    ad::adam_update(v, g, st, 1e-3);
    const double expected = 1e-3 * 0.37 / (0.37 + 1e-8);
    CHECK(std::abs(-v(0, 0) - expected) < 1e-15);
  }
  // constant gradient walks opposite to its sign
  {
    Matrix v(1, 2);
    v << 0.0, 0.0;
    Matrix g(1, 2);
    g << 0.2, -0.5;
    ad::AdamState st;
    for (int i = 0; i < 100; ++i) ad::adam_update(v, g, st, 1e-3);
    CHECK(v(0, 0) < 0.0);
    CHECK(v(0, 1) > 0.0);
    CHECK(st.step == 100);
  }
}

TEST_CASE("Adam optimizer consumes Parameter::grad deterministically") {
  Parameter p("p", 1, 2);
  p.value << 1.0, -1.0;
  ad::Adam adam({&p}, 1e-2);
  p.grad << 0.5, -0.5;
  adam.step();
  const Matrix after_one = p.value;
  CHECK(after_one(0, 0) < 1.0);
  CHECK(after_one(0, 1) > -1.0);

  Parameter q("q", 1, 2);
  q.value << 1.0, -1.0;
  ad::Adam adam2({&q}, 1e-2);
  q.grad << 0.5, -0.5;
  adam2.step();
  CHECK((q.value - after_one).cwiseAbs().maxCoeff() == 0.0);
}
