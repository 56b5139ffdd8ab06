#include <doctest.h>

#include <cmath>

#include "mol/conditional.hpp"
#include "test_util.hpp"

using namespace mol;
using mol::testing::fd_worst;
using mol::testing::probe;
using mol::testing::rand_param;
using mol::testing::random_block;

namespace {

LayerNormParams<double> unit_norm(Index d, double eps = 1e-5) {
  return {Vard::parameter(Tensord::ones(Shape{d})), Vard::parameter(Tensord::zeros(Shape{d})), eps};
}

// Direct loop implementation: rotate, score, softmax, mix. One head.
RowMatrix<double> naive_attention(const RowMatrix<double>& x, const RowMatrix<double>& wq, const RowMatrix<double>& wk,
                                  const RowMatrix<double>& wv, const RowMatrix<double>& wo, double base) {
  const Index n = x.rows(), d = x.cols();
  RowMatrix<double> q = x * wq, k = x * wk, v = x * wv;
  for (Index t = 0; t < n; ++t) {
    for (Index j = 0; j < d / 2; ++j) {
      const double th = static_cast<double>(t) * std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(d));
      for (RowMatrix<double>* m : {&q, &k}) {
        const double a = (*m)(t, 2 * j), b = (*m)(t, 2 * j + 1);
        (*m)(t, 2 * j) = std::cos(th) * a - std::sin(th) * b;
        (*m)(t, 2 * j + 1) = std::sin(th) * a + std::cos(th) * b;
      }
    }
  }
  RowMatrix<double> out = RowMatrix<double>::Zero(n, d);
  for (Index i = 0; i < n; ++i) {
    std::vector<double> s(static_cast<std::size_t>(n));
    double mx = -1e300, z = 0;
    for (Index j = 0; j < n; ++j) {
      double dot = 0;
      for (Index c = 0; c < d; ++c) dot += q(i, c) * k(j, c);
      s[static_cast<std::size_t>(j)] = dot / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, s[static_cast<std::size_t>(j)]);
    }
    for (auto& e : s) z += (e = std::exp(e - mx));
    for (Index j = 0; j < n; ++j) out.row(i) += (s[static_cast<std::size_t>(j)] / z) * v.row(j);
  }
  return out * wo;
}

}  // namespace

TEST_CASE("layer_norm examples") {
  const auto x = Vard::constant(Tensord::from_rows({{5, 5, 5, 5}}));
  CHECK(layer_norm(x, unit_norm(4)).value() == Tensord::zeros(Shape{1, 4}));

  std::mt19937_64 rng(1);
  const auto r = Vard::constant(Tensord::randn(Shape{3, 4}, rng));
  LayerNormParams<double> p{Vard::constant(Tensord::zeros(Shape{4})), Vard::constant(Tensord::from_vector({1, -2, 3, 0.5})),
                            1e-5};
  const Tensord y = layer_norm(r, p).value();
  for (Index i = 0; i < 3; ++i)
    for (Index c = 0; c < 4; ++c) CHECK(y.at(i, c) == p.bias.value()[c]);

  const auto s = Vard::constant(Tensord::from_rows({{1, 2, 3}}));
  const Tensord z = layer_norm(s, unit_norm(3, 1e-14)).value();
  const double v = std::sqrt(1.5);  // (x - 2) / sqrt(2/3)
  CHECK(z.at(0, 0) == doctest::Approx(-v).epsilon(1e-10));
  CHECK(std::abs(z.at(0, 1)) < 1e-12);
  CHECK(z.at(0, 2) == doctest::Approx(v).epsilon(1e-10));
}

TEST_CASE("rope examples") {
  const RopeConfig cfg(10000.0, 8, 64);
  std::mt19937_64 rng(2);
  const Tensord x = Tensord::randn(Shape{1, 2, 8}, rng);
  CHECK(rope_rotate(x, {0}, cfg) == x);

  const Tensord y = Tensord::randn(Shape{5, 3, 8}, rng);
  const Tensord ry = rope_rotate(y, {0, 7, 13, 40, 63}, cfg);
  for (Index i = 0; i < y.numel(); i += 2) {
    const double before = std::hypot(y[i], y[i + 1]);
    const double after = std::hypot(ry[i], ry[i + 1]);
    CHECK(std::abs(before - after) <= 1e-12);
  }

  CHECK_THROWS_AS(RopeConfig(10000.0, 7, 64), ConfigError);
  CHECK_THROWS_AS(rope_rotate(y, {0, 1, 2, 3, 64}, cfg), InputError);
}

TEST_CASE("rope relative-position property") {
  const RopeConfig cfg(10000.0, 16, 256);
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<Index> pos(0, 127);
  double worst = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const Tensord q = Tensord::randn(Shape{1, 1, 16}, rng);
    const Tensord k = Tensord::randn(Shape{1, 1, 16}, rng);
    const Index m = pos(rng), n = pos(rng), s = pos(rng);
    const double a = rope_rotate(q, {m}, cfg).data().dot(rope_rotate(k, {n}, cfg).data());
    const double b = rope_rotate(q, {m + s}, cfg).data().dot(rope_rotate(k, {n + s}, cfg).data());
    worst = std::max(worst, std::abs(a - b));
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("attention with one token") {
  std::mt19937_64 rng(4);
  const auto b = random_block(8, 16, 2, true, rng);
  const RopeConfig cfg(10000.0, 4, 16);
  const auto x = Vard::constant(Tensord::randn(Shape{1, 8}, rng));
  Tensord w;
  const Tensord y = attention(x, b.attn, cfg, 1, {}, &w).value();
  CHECK(w.shape() == Shape{2, 1});
  CHECK(w[0] == 1.0);
  CHECK(w[1] == 1.0);
  const RowMatrix<double> expect = x.value().matrix() * b.attn.w_v.value().matrix() * b.attn.w_o.value().matrix();
  CHECK((y.matrix() - expect).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("attention weight rows sum to one") {
  std::mt19937_64 rng(5);
  const auto b = random_block(8, 16, 2, true, rng, 1.0);
  const RopeConfig cfg(10000.0, 4, 16);
  const auto x = Vard::constant(Tensord::randn(Shape{12, 8}, rng));
  Tensord w;
  (void)attention(x, b.attn, cfg, 6, {}, &w);
  for (Index r = 0; r < w.rows(); ++r) CHECK(std::abs(w.matrix().row(r).sum() - 1.0) <= 1e-12);
}

TEST_CASE("attention matches a naive oracle") {
  std::mt19937_64 rng(6);
  AttentionParams<double> p;
  p.w_q = rand_param(Shape{4, 4}, rng);
  p.w_k = rand_param(Shape{4, 4}, rng);
  p.w_v = rand_param(Shape{4, 4}, rng);
  p.w_o = rand_param(Shape{4, 4}, rng);
  p.n_heads = 1;
  const RopeConfig cfg(10000.0, 4, 8);
  const Tensord x = Tensord::randn(Shape{3, 4}, rng);
  const Tensord y = attention(Vard::constant(x), p, cfg, 3).value();
  const RowMatrix<double> ref = naive_attention(x.matrix(), p.w_q.value().matrix(), p.w_k.value().matrix(),
                                                p.w_v.value().matrix(), p.w_o.value().matrix(), 10000.0);
  CHECK((y.matrix() - ref).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("attention key mask") {
  std::mt19937_64 rng(7);
  const auto b = random_block(8, 16, 2, true, rng, 1.0);
  const RopeConfig cfg(10000.0, 4, 16);
  const auto x = Vard::constant(Tensord::randn(Shape{4, 8}, rng));
  Tensord w;
  (void)attention(x, b.attn, cfg, 4, {true, true, false, true}, &w);
  for (Index r = 0; r < w.rows(); ++r) CHECK(w.at(r, 2) == 0.0);
  CHECK_THROWS_AS(attention(x, b.attn, cfg, 4, {true, false}), DimensionError);
}

TEST_CASE("attention gradient") {
  std::mt19937_64 rng(8);
  const auto b = random_block(8, 16, 2, true, rng, 0.5);
  const RopeConfig cfg(10000.0, 4, 16);
  const Vard x = rand_param(Shape{6, 8}, rng);
  const std::vector<bool> valid{true, true, true, true, false, true};
  CHECK(fd_worst([&] { return probe(attention(x, b.attn, cfg, 3, valid)); },
                 {x, b.attn.w_q, b.attn.w_k, b.attn.w_v, b.attn.w_o}) < 1e-4);
}

TEST_CASE("ffn examples") {
  std::mt19937_64 rng(9);
  for (bool geglu : {true, false}) {
    CAPTURE(geglu);
    const auto b = random_block(8, 12, 2, geglu, rng);
    const auto x = Vard::constant(Tensord::randn(Shape{5, 8}, rng));
    LoraDelta<double> zero{Vard::constant(Tensord::zeros(Shape{8, 2})), rand_param(Shape{2, 12}, rng),
                           Vard::constant(Tensord::zeros(Shape{12, 2})), rand_param(Shape{2, 8}, rng), 3.0};
    CHECK(ffn_forward(x, b.ffn, std::optional(zero)).value() == ffn_forward(x, b.ffn).value());

    FfnParams<double> dead = b.ffn;
    dead.w_up = Vard::constant(Tensord::zeros(Shape{12, 8}));
    CHECK(ffn_forward(x, dead).value() == Tensord::zeros(Shape{5, 8}));

    const LoraDelta<double> delta{rand_param(Shape{8, 2}, rng), rand_param(Shape{2, 12}, rng),
                                  rand_param(Shape{12, 2}, rng), rand_param(Shape{2, 8}, rng), 1.5};
    const Tensord fused = ffn_forward(x, b.ffn, std::optional(delta)).value();
    const Tensord dense = ffn_forward(x, lora_materialise(b.ffn, delta)).value();
    CHECK(max_abs_diff(fused, dense) <= 1e-12);
  }
}

TEST_CASE("encoder layer with zero weights is the identity") {
  std::mt19937_64 rng(10);
  SharedBlockParams<double> b = random_block(8, 16, 2, true, rng);
  for (Vard* w : {&b.attn.w_q, &b.attn.w_k, &b.attn.w_v, &b.attn.w_o, &b.ffn.w_down, &b.ffn.w_gate, &b.ffn.w_up})
    w->mutable_value().data().setZero();
  const RopeConfig cfg(10000.0, 4, 16);
  for (Index seq : {1, 3, 7}) {
    const auto h = Vard::constant(Tensord::randn(Shape{2 * seq, 8}, rng));
    const Tensord out = encoder_layer_forward(h, b, cfg, seq).value();
    CHECK(out == h.value());
  }
}

TEST_CASE("encoder layer residual path with zero output projections") {
  std::mt19937_64 rng(11);
  SharedBlockParams<double> b = random_block(8, 16, 2, true, rng);
  b.attn.w_o.mutable_value().data().setZero();
  b.ffn.w_up.mutable_value().data().setZero();
  const auto h = Vard::constant(Tensord::randn(Shape{5, 8}, rng));
  CHECK(encoder_layer_forward(h, b, RopeConfig(10000.0, 4, 16), 5).value() == h.value());
}

TEST_CASE("encoder layer is pure and differentiable") {
  std::mt19937_64 rng(12);
  const auto b = random_block(8, 12, 2, true, rng, 0.4);
  const RopeConfig cfg(10000.0, 4, 16);
  const Vard h = rand_param(Shape{6, 8}, rng);
  const Tensord y1 = encoder_layer_forward(h, b, cfg, 3).value();
  const Tensord y2 = encoder_layer_forward(h, b, cfg, 3).value();
  CHECK(y1 == y2);
  CHECK(y1.shape() == h.shape());
  CHECK(fd_worst([&] { return probe(encoder_layer_forward(h, b, cfg, 3)); },
                 {h, b.attn_norm.gain, b.attn_norm.bias, b.attn.w_q, b.attn.w_k, b.attn.w_v, b.attn.w_o,
                  b.ffn_norm.gain, b.ffn_norm.bias, b.ffn.w_down, b.ffn.w_gate, b.ffn.w_up}) < 1e-4);
}
