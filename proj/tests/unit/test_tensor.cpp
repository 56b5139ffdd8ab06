#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <set>

#include "mol/ops.hpp"
#include "test_util.hpp"

using namespace mol;
using mol::testing::fd_worst;
using mol::testing::probe;
using mol::testing::rand_param;

TEST_CASE("tensor shape invariants") {
  CHECK_THROWS_AS(Tensord(Shape{2, 0}), DimensionError);
  CHECK_THROWS_AS(Tensord(Shape{}), DimensionError);
  CHECK_THROWS_AS(Tensord(Shape{2, 2}, ColVector<double>::Zero(3)), DimensionError);
  const Tensord t(Shape{2, 3, 4});
  CHECK(t.numel() == 24);
  CHECK(t.rows() == 6);
  CHECK(t.cols() == 4);
  CHECK_THROWS_AS(t.reshaped(Shape{5, 5}), DimensionError);
  CHECK_THROWS_AS(t.item(), UsageError);
}

TEST_CASE("matmul examples") {
  const auto I = Vard::constant(Tensord::from_rows({{1, 0}, {0, 1}}));
  const auto m = Vard::constant(Tensord::from_rows({{1, 2}, {3, 4}}));
  CHECK(matmul(I, m).value() == m.value());

  const auto a = Vard::constant(Tensord::from_rows({{1, 2}}));
  const auto b = Vard::constant(Tensord::from_rows({{3}, {4}}));
  CHECK(matmul(a, b).value().item() == 11.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  const auto a = Vard::constant(Tensord(Shape{2, 3}));
  const auto b = Vard::constant(Tensord(Shape{2, 2}));
  try {
    (void)matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[2,2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient against finite differences") {
  std::mt19937_64 rng(1);
  const Vard a = rand_param(Shape{5, 4}, rng);
  const Vard b = rand_param(Shape{4, 3}, rng);
  CHECK(fd_worst([&] { return probe(matmul(a, b)); }, {a, b}) < 1e-6);
}

TEST_CASE("softmax examples") {
  auto sm = [](std::initializer_list<double> v) { return softmax_lastdim(Vard::constant(Tensord::from_vector(v))).value(); };
  const Tensord u = sm({0, 0, 0});
  for (Index i = 0; i < 3; ++i) CHECK(u[i] == doctest::Approx(1.0 / 3).epsilon(1e-15));

  const Tensord big = sm({1000, 0});
  CHECK(big.all_finite());
  CHECK(big[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(big[1] < 1e-300);

  const Tensord l2 = sm({std::numbers::ln2, 0});
  CHECK(std::abs(l2[0] - 2.0 / 3) < 1e-15);
  CHECK(std::abs(l2[1] - 1.0 / 3) < 1e-15);

  CHECK_THROWS_AS(sm({std::numeric_limits<double>::quiet_NaN(), 0}), NumericError);
  CHECK_THROWS_AS(sm({std::numeric_limits<double>::infinity(), 0}), NumericError);
}

TEST_CASE("softmax rows sum to one at magnitude 1e3") {
  std::mt19937_64 rng(2);
  const Tensord x = Tensord::uniform(Shape{200, 7}, rng, -1000.0, 1000.0);
  const Tensord p = softmax_lastdim(Vard::constant(x)).value();
  CHECK((p.data().array() >= 0).all());
  for (Index r = 0; r < p.rows(); ++r) CHECK(std::abs(p.matrix().row(r).sum() - 1.0) <= 1e-12);
}

TEST_CASE("gelu examples") {
  auto g = [](double x) { return gelu(Vard::constant(Tensord::scalar(x))).value().item(); };
  CHECK(g(0.0) == 0.0);
  CHECK(g(30.0) == doctest::Approx(30.0).epsilon(1e-12));
  CHECK(std::abs(g(-30.0)) < 1e-12);
  // Phi(1) from standard normal tables.
  CHECK(std::abs(g(1.0) - 0.8413447460685429) < 1e-15);
}

TEST_CASE("backward examples") {
  std::mt19937_64 rng(3);
  const Vard w = rand_param(Shape{3, 4}, rng);
  backward(sum(w));
  CHECK(w.grad() == Tensord::ones(Shape{3, 4}));

  w.zero_grad();
  backward(scale(sum(mul(w, w)), 0.5));
  CHECK(max_abs_diff(w.grad(), w.value()) < 1e-15);

  CHECK_THROWS_AS(backward(w), UsageError);
}

TEST_CASE("unused parameters receive zero gradient") {
  std::mt19937_64 rng(4);
  const Vard used = rand_param(Shape{2, 2}, rng);
  const Vard unused = rand_param(Shape{2, 2}, rng);
  backward(sum(used));
  CHECK_FALSE(unused.has_grad());
  CHECK(unused.grad() == Tensord::zeros(Shape{2, 2}));
}

TEST_CASE("tape visits shared nodes once and accumulates") {
  std::mt19937_64 rng(5);
  const Vard x = rand_param(Shape{2, 3}, rng);
  const Vard y = gelu(x);
  // y feeds two branches; its gradient must be the sum of both.
  const Vard loss = add(sum(y), sum(scale(y, 2.0)));
  GradTape<double> tape(loss);
  std::set<const Node<double>*> unique(tape.order().begin(), tape.order().end());
  CHECK(unique.size() == tape.order().size());
  CHECK(tape.order().back() == loss.node().get());
  CHECK(fd_worst([&] { return add(sum(gelu(x)), sum(scale(gelu(x), 2.0))); }, {x}) < 1e-6);
}

TEST_CASE("backward is deterministic") {
  std::mt19937_64 rng(6);
  const Vard a = rand_param(Shape{6, 5}, rng);
  const Vard b = rand_param(Shape{5, 5}, rng);
  auto run = [&] {
    a.zero_grad();
    b.zero_grad();
    backward(probe(softmax_lastdim(gelu(matmul(a, b)))));
    return std::make_pair(a.grad(), b.grad());
  };
  const auto g1 = run();
  const auto g2 = run();
  CHECK(g1.first == g2.first);
  CHECK(g1.second == g2.second);
}

TEST_CASE("gradient shape equals tensor shape") {
  std::mt19937_64 rng(7);
  const Vard a = rand_param(Shape{3, 2, 4}, rng);
  backward(probe(gelu(a)));
  CHECK(a.grad().shape() == a.shape());
}

TEST_CASE("finite differences: linear ops") {
  std::mt19937_64 rng(8);
  const Vard a = rand_param(Shape{4, 3}, rng);
  const Vard b = rand_param(Shape{4, 3}, rng);
  const Vard w = rand_param(Shape{4, 1}, rng);
  const Vard v = rand_param(Shape{1, 3}, rng);
  const Vard c = rand_param(Shape{2, 3}, rng);

  SUBCASE("transpose") { CHECK(fd_worst([&] { return probe(transpose(a)); }, {a}) < 1e-6); }
  SUBCASE("reshape") { CHECK(fd_worst([&] { return probe(reshape(a, Shape{2, 6})); }, {a}) < 1e-6); }
  SUBCASE("add") { CHECK(fd_worst([&] { return probe(add(a, b)); }, {a, b}) < 1e-6); }
  SUBCASE("sub") { CHECK(fd_worst([&] { return probe(sub(a, b)); }, {a, b}) < 1e-6); }
  SUBCASE("scale") { CHECK(fd_worst([&] { return probe(scale(a, -1.7)); }, {a}) < 1e-6); }
  SUBCASE("add_constant") { CHECK(fd_worst([&] { return probe(add_constant(a, b.value())); }, {a}) < 1e-6); }
  SUBCASE("add_rowvec") { CHECK(fd_worst([&] { return probe(add_rowvec(a, v)); }, {a, v}) < 1e-6); }
  SUBCASE("gather_rows") { CHECK(fd_worst([&] { return probe(gather_rows(a, {3, 0, 3})); }, {a}) < 1e-6); }
  SUBCASE("scatter_rows") { CHECK(fd_worst([&] { return probe(scatter_rows(c, {2, 0}, 4)); }, {c}) < 1e-6); }
  SUBCASE("slice_cols") { CHECK(fd_worst([&] { return probe(slice_cols(a, 1, 2)); }, {a}) < 1e-6); }
  SUBCASE("concat_cols") { CHECK(fd_worst([&] { return probe(concat_cols<double>({a, b})); }, {a, b}) < 1e-6); }
  SUBCASE("concat_rows") { CHECK(fd_worst([&] { return probe(concat_rows<double>({a, c})); }, {a, c}) < 1e-6); }
  SUBCASE("sum") { CHECK(fd_worst([&] { return sum(a); }, {a}) < 1e-6); }
  SUBCASE("mean") { CHECK(fd_worst([&] { return mean(a); }, {a}) < 1e-6); }
  SUBCASE("mean_rows") { CHECK(fd_worst([&] { return probe(mean_rows(a)); }, {a}) < 1e-6); }
  SUBCASE("scale_rows (bilinear)") { CHECK(fd_worst([&] { return probe(scale_rows(a, w)); }, {a, w}) < 1e-6); }
}

TEST_CASE("finite differences: nonlinear ops") {
  std::mt19937_64 rng(9);
  const Vard a = rand_param(Shape{4, 5}, rng);
  const Vard b = rand_param(Shape{4, 5}, rng);
  const Vard gain = rand_param(Shape{5}, rng);
  const Vard bias = rand_param(Shape{5}, rng);

  SUBCASE("mul") { CHECK(fd_worst([&] { return probe(mul(a, b)); }, {a, b}) < 1e-4); }
  SUBCASE("gelu") { CHECK(fd_worst([&] { return probe(gelu(a)); }, {a}) < 1e-4); }
  SUBCASE("softmax") { CHECK(fd_worst([&] { return probe(softmax_lastdim(a)); }, {a}) < 1e-4); }
  SUBCASE("layer_norm") {
    CHECK(fd_worst([&] { return probe(layer_norm(a, gain, bias, 1e-5)); }, {a, gain, bias}) < 1e-4);
  }
  SUBCASE("cross_entropy") { CHECK(fd_worst([&] { return cross_entropy(a, {0, 4, 2, 2}); }, {a}) < 1e-4); }
  SUBCASE("distill_kl") { CHECK(fd_worst([&] { return distill_kl(a, b.value(), 2.0); }, {a}) < 1e-4); }
}
