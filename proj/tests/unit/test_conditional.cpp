#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mol/model.hpp"
#include "test_util.hpp"

using namespace mol;
using mol::testing::fd_worst;
using mol::testing::probe;
using mol::testing::rand_param;
using mol::testing::random_block;
using mol::testing::random_expert;
using mol::testing::random_mol;

namespace {

Tensord probs_of(std::initializer_list<double> p) { return Tensord::from_vector(p); }

Vard one_hot_probs(Index rows, Index E, Index j) {
  Tensord p(Shape{rows, E});
  for (Index t = 0; t < rows; ++t) p.at(t, j) = 1.0;
  return Vard::constant(p);
}

}  // namespace

TEST_CASE("route_topk examples") {
  const Tensord p = probs_of({0.5, 0.3, 0.2});
  const auto two = topk_renormalised<double>(p.data(), 2);
  CHECK(two.indices == std::vector<Index>{0, 1});
  CHECK(std::abs(two.weights[0] - 0.625) < 1e-15);
  CHECK(std::abs(two.weights[1] - 0.375) < 1e-15);

  const auto one = topk_renormalised<double>(probs_of({0.1, 0.7, 0.2}).data(), 1);
  CHECK(one.indices == std::vector<Index>{1});
  CHECK(one.weights[0] == 1.0);

  const auto all = topk_renormalised<double>(p.data(), 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(all.weights[i] - p[all.indices[i]]) < 1e-15);

  const auto tie = topk_renormalised<double>(probs_of({0.25, 0.25, 0.25, 0.25}).data(), 2);
  CHECK(tie.indices == std::vector<Index>{0, 1});

  CHECK_THROWS_AS(topk_renormalised<double>(p.data(), 0), ConfigError);
  CHECK_THROWS_AS(topk_renormalised<double>(p.data(), 4), ConfigError);
}

TEST_CASE("route_topk on a hidden vector") {
  std::mt19937_64 rng(1);
  Router<double> r{rand_param(Shape{6, 4}, rng), 2, false};
  const Tensord h = Tensord::randn(Shape{6}, rng);
  const auto tk = route_topk(h, r);
  CHECK(tk.indices.size() == 2);
  CHECK(std::abs(tk.weights[0] + tk.weights[1] - 1.0) <= 1e-12);
  CHECK(tk.weights[0] >= tk.weights[1]);
}

TEST_CASE("renormalised top-k weights sum to one") {
  std::mt19937_64 rng(2);
  const Vard x = Vard::constant(Tensord::randn(Shape{300, 8}, rng));
  Router<double> r{rand_param(Shape{8, 5}, rng, 2.0), 2, false};
  for (Index k = 1; k <= 5; ++k) {
    const Tensord gate = topk_gate(router_probabilities(x, r), k).value();
    for (Index t = 0; t < gate.rows(); ++t) CHECK(std::abs(gate.matrix().row(t).sum() - 1.0) <= 1e-12);
  }
}

TEST_CASE("mol with zero A matrices equals the shared ffn") {
  std::mt19937_64 rng(3);
  const auto b = random_block(8, 16, 2, true, rng);
  auto mol = random_mol(8, 16, 4, 2, 2, rng);
  for (auto& e : mol.experts) {
    e.a1.mutable_value().data().setZero();
    e.a2.mutable_value().data().setZero();
  }
  const auto x = Vard::constant(Tensord::randn(Shape{10, 8}, rng));
  CHECK(max_abs_diff(mol_forward(x, mol, b.ffn).value(), ffn_forward(x, b.ffn).value()) <= 1e-12);
}

TEST_CASE("one-hot routing equals the single-expert ffn") {
  std::mt19937_64 rng(4);
  const auto b = random_block(8, 16, 2, true, rng);
  const auto mol = random_mol(8, 16, 4, 2, 2, rng);
  const auto x = Vard::constant(Tensord::randn(Shape{10, 8}, rng));
  for (Index j = 0; j < 4; ++j) {
    const Tensord y = mol_forward_with_probs(x, mol, b.ffn, one_hot_probs(10, 4, j)).value();
    const Tensord ref = ffn_forward(x, b.ffn, std::optional(mol.experts[j].delta())).value();
    CHECK(max_abs_diff(y, ref) <= 1e-12);
  }
}

TEST_CASE("identical experts make routing irrelevant") {
  std::mt19937_64 rng(5);
  const auto b = random_block(8, 16, 2, true, rng);
  auto mol = random_mol(8, 16, 4, 2, 2, rng);
  for (auto& e : mol.experts) e = mol.experts.front();
  const auto x = Vard::constant(Tensord::randn(Shape{10, 8}, rng));
  const Tensord ref = ffn_forward(x, b.ffn, std::optional(mol.experts[0].delta())).value();
  for (int trial = 0; trial < 3; ++trial) {
    mol.router.weight = rand_param(Shape{8, 4}, rng, 3.0);
    CHECK(max_abs_diff(mol_forward(x, mol, b.ffn).value(), ref) <= 1e-12);
  }
}

TEST_CASE("mol is invariant under expert permutation") {
  std::mt19937_64 rng(6);
  const auto b = random_block(8, 16, 2, true, rng);
  const auto mol = random_mol(8, 16, 5, 2, 2, rng);
  const auto x = Vard::constant(Tensord::randn(Shape{20, 8}, rng));
  std::vector<Index> perm{3, 0, 4, 1, 2};
  MolLayer<double> p = mol;
  Tensord wr(Shape{8, 5});
  for (Index e = 0; e < 5; ++e) {
    p.experts[e] = mol.experts[perm[e]];
    wr.matrix().col(e) = mol.router.weight.value().matrix().col(perm[e]);
  }
  p.router.weight = Vard::parameter(wr);
  CHECK(max_abs_diff(mol_forward(x, mol, b.ffn).value(), mol_forward(x, p, b.ffn).value()) <= 1e-12);
}

TEST_CASE("scaling router logits keeps the selected experts") {
  std::mt19937_64 rng(7);
  const Vard x = Vard::constant(Tensord::randn(Shape{50, 8}, rng));
  Router<double> r{rand_param(Shape{8, 6}, rng), 2, false};
  std::vector<std::vector<Index>> base, scaled;
  (void)topk_gate(router_probabilities(x, r), 2, &base);
  Router<double> s{Vard::constant(r.weight.value()), 2, false};
  s.weight.mutable_value().data() *= 3.7;
  (void)topk_gate(router_probabilities(x, s), 2, &scaled);
  CHECK(base == scaled);
}

TEST_CASE("unselected experts receive zero gradient") {
  std::mt19937_64 rng(8);
  const auto b = random_block(8, 16, 2, true, rng);
  const auto mol = random_mol(8, 16, 4, 2, 2, rng);
  const auto x = Vard::constant(Tensord::randn(Shape{1, 8}, rng));
  RoutingTrace<double> trace;
  backward(probe(mol_forward(x, mol, b.ffn, &trace)));
  const auto& sel = trace.selected.front();
  for (Index e = 0; e < 4; ++e) {
    const bool chosen = std::find(sel.begin(), sel.end(), e) != sel.end();
    const auto& ex = mol.experts[e];
    for (const Vard* v : {&ex.a1, &ex.b1, &ex.a2, &ex.b2}) {
      CHECK(chosen == (v->grad().data().cwiseAbs().maxCoeff() > 0));
    }
  }
}

TEST_CASE("mol gradient against finite differences") {
  std::mt19937_64 rng(9);
  const auto b = random_block(8, 16, 2, true, rng, 0.4);
  const auto mol = random_mol(8, 16, 4, 2, 2, rng);
  const Vard x = rand_param(Shape{12, 8}, rng);
  std::vector<Vard> params{x, mol.router.weight, b.ffn.w_down, b.ffn.w_gate, b.ffn.w_up};
  for (const auto& e : mol.experts) params.insert(params.end(), {e.a1, e.b1, e.a2, e.b2});
  CHECK(fd_worst([&] { return probe(mol_forward(x, mol, b.ffn)); }, params) < 1e-4);
}

TEST_CASE("moa examples") {
  std::mt19937_64 rng(10);
  const auto b = random_block(8, 16, 2, true, rng);
  MoaLayer<double> moa;
  for (Index e = 0; e < 3; ++e) moa.adapters.push_back({rand_param(Shape{8, 4}, rng), rand_param(Shape{4, 8}, rng)});
  moa.router = {rand_param(Shape{8, 3}, rng), 2, false};
  const auto x = Vard::constant(Tensord::randn(Shape{7, 8}, rng));
  const Tensord y = ffn_forward(x, b.ffn).value();

  for (Index j = 0; j < 3; ++j) {
    const Tensord out = moa_forward_with_probs(x, moa, b.ffn, one_hot_probs(7, 3, j)).value();
    Tensord ref = y;
    ref.data() += adapter_forward(Vard::constant(y), moa.adapters[j]).value().data();
    CHECK(max_abs_diff(out, ref) <= 1e-12);
  }

  MoaLayer<double> zero = moa;
  for (auto& a : zero.adapters) a.up = Vard::constant(Tensord::zeros(Shape{4, 8}));
  CHECK(max_abs_diff(moa_forward(x, zero, b.ffn).value(), y) <= 1e-12);

  std::vector<Vard> params{moa.router.weight};
  for (const auto& a : moa.adapters) params.insert(params.end(), {a.down, a.up});
  const Vard xp = rand_param(Shape{7, 8}, rng);
  params.push_back(xp);
  CHECK(fd_worst([&] { return probe(moa_forward(xp, moa, b.ffn)); }, params) < 1e-4);
}

TEST_CASE("moa and mol parameter budgets agree within 5%") {
  ModelConfig c;
  c.d_model = 64;
  c.d_ff = 128;
  c.n_experts = 8;
  c.lora_rank = 8;
  c.mol_groups = {1};
  const auto mol = count_params(c).breakdown.at("conditional");
  c.conditional = ConditionalKind::moa;
  const auto moa = count_params(c).breakdown.at("conditional");
  CHECK(std::abs(static_cast<double>(moa - mol)) <= 0.05 * static_cast<double>(mol));
}

TEST_CASE("lora_materialise examples") {
  std::mt19937_64 rng(11);
  const auto b = random_block(6, 8, 2, true, rng);
  auto e = random_expert(6, 8, 2, 4.0, rng);
  e.a1.mutable_value().data().setZero();
  e.a2.mutable_value().data().setZero();
  const auto zero = lora_materialise(b.ffn, e);
  CHECK(zero.w_down.value() == b.ffn.w_down.value());
  CHECK(zero.w_up.value() == b.ffn.w_up.value());
  CHECK(zero.w_gate.value() == b.ffn.w_gate.value());

  LoraExpert<double> unit{Vard::constant(Tensord::zeros(Shape{6, 1})), Vard::constant(Tensord::zeros(Shape{1, 8})),
                          Vard::constant(Tensord::zeros(Shape{8, 1})), Vard::constant(Tensord::zeros(Shape{1, 6})), 1,
                          1.0};
  unit.a1.mutable_value()[0] = 1;
  unit.b1.mutable_value()[0] = 1;
  const auto bumped = lora_materialise(b.ffn, unit);
  Tensord expect = b.ffn.w_down.value();
  expect.at(0, 0) += 1.0;
  CHECK(bumped.w_down.value() == expect);
  CHECK(bumped.w_up.value() == b.ffn.w_up.value());

  const auto full = random_expert(6, 8, 2, 4.0, rng);
  const auto x = Vard::constant(Tensord::randn(Shape{4, 6}, rng));
  CHECK(max_abs_diff(ffn_forward(x, lora_materialise(b.ffn, full)).value(),
                     ffn_forward(x, b.ffn, std::optional(full.delta())).value()) <= 1e-12);
}

TEST_CASE("load balance examples") {
  // Perfect balance: two tokens, uniform soft probabilities, one slot each.
  const Vard u = Vard::constant(Tensord::from_rows({{0.5, 0.5}, {0.5, 0.5}}));
  CHECK(load_balance_loss(u, {{0}, {1}}).value().item() == doctest::Approx(1.0).epsilon(1e-15));

  const Vard worst = Vard::constant(Tensord::from_rows({{1, 0, 0}, {1, 0, 0}}));
  CHECK(load_balance_loss(worst, {{0}, {0}}).value().item() == doctest::Approx(3.0).epsilon(1e-15));

  CHECK_THROWS_AS(load_balance_loss(u, {{0}}), DimensionError);
}

TEST_CASE("load balance lower bound when assignment fractions follow the probabilities") {
  // With f_i = P_i the loss is E * sum P_i^2 >= 1 by Cauchy-Schwarz.
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const Index E = 2 + trial % 7;
    const Vard p = softmax_lastdim(Vard::constant(Tensord::randn(Shape{5, E}, rng, 2.0)));
    const Tensord P = mean_rows(p).value();
    const double loss = static_cast<double>(E) * P.data().squaredNorm();
    CHECK(loss >= 1.0 - 1e-12);
  }
}

TEST_CASE("hard top-k assignment can push the balance term below one") {
  // Counterexample kept as documentation: mean probability mass and hard
  // counts can be anti-aligned.
  const Vard p = Vard::constant(Tensord::from_rows({{0.51, 0.49}, {0.51, 0.49}, {0.0, 1.0}}));
  const double loss = load_balance_loss(p, {{0}, {0}, {1}}).value().item();
  CHECK(loss < 1.0);
}

TEST_CASE("routing entropy") {
  const Tensord u(Shape{3, 4}, 0.25);
  CHECK(routing_entropy(u) == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  CHECK(routing_entropy(Tensord::from_rows({{1, 0}})) == 0.0);
}
