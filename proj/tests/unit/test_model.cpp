#include <doctest.h>

#include "mol/model.hpp"
#include "test_util.hpp"

using namespace mol;

namespace {

ModelConfig small(Index N, Index K, std::vector<Index> mol_groups = {}) {
  ModelConfig c;
  c.n_layers = N;
  c.n_groups = K;
  c.d_model = 16;
  c.d_ff = 32;
  c.n_heads = 2;
  c.vocab_size = 20;
  c.max_seq = 16;
  c.mol_groups = std::move(mol_groups);
  c.n_experts = 3;
  c.top_k = 2;
  c.lora_rank = 2;
  c.lora_alpha = 4;
  return c;
}

TokenBatch random_batch(Index n_seq, Index seq_len, Index vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Index> tok(3, vocab - 1);
  TokenBatch b{{}, seq_len};
  for (Index i = 0; i < n_seq * seq_len; ++i) b.ids.push_back(tok(rng));
  return b;
}

// Widens every tensor so layers do visibly different things.
void randomise(const RecursiveEncoder& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (const auto& p : m.named_parameters()) {
    Tensord v = Tensord::randn(p.var.shape(), rng, 0.3);
    if (p.name.find("norm.gain") != std::string::npos) v.data().array() += 1.0;
    p.var.mutable_value() = std::move(v);
  }
}

std::vector<bool> valid_keys(const TokenBatch& b) {
  std::vector<bool> v;
  for (Index id : b.ids) v.push_back(id != kPadId);
  return v;
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_THROWS_AS(RecursiveEncoder(small(5, 2), 0), ConfigError);
  CHECK_THROWS_AS(RecursiveEncoder(small(4, 2, {3}), 0), ConfigError);
  CHECK_THROWS_AS(RecursiveEncoder(small(4, 2, {0}), 0), ConfigError);
  ModelConfig big_rank = small(4, 2, {1});
  big_rank.lora_rank = 5;  // > min(16, 32) / 4
  CHECK_THROWS_AS(RecursiveEncoder(big_rank, 0), ConfigError);
  ModelConfig heads = small(4, 2);
  heads.n_heads = 3;
  CHECK_THROWS_AS(RecursiveEncoder(heads, 0), ConfigError);
}

TEST_CASE("layer to group indexing") {
  const RecursiveEncoder m(small(4, 2), 0);
  CHECK(m.group_of_layer(1) == 1);
  CHECK(m.group_of_layer(2) == 1);
  CHECK(m.group_of_layer(3) == 2);
  CHECK(m.group_of_layer(4) == 2);
  const RecursiveEncoder m6(small(6, 2), 0);
  CHECK(m6.group_of_layer(3) == 1);
  CHECK(m6.group_of_layer(4) == 2);
}

TEST_CASE("encoder applies group ceil(i/G) at layer i") {
  const RecursiveEncoder m(small(6, 3), 1);
  randomise(m, 2);
  const TokenBatch b = random_batch(2, 5, 20, 3);
  const RopeConfig rope = m.config().rope();
  Vard h = gather_rows(m.embedding(), b.ids);
  for (Index g : {1, 1, 2, 2, 3, 3}) h = encoder_layer_forward(h, m.group(g), rope, b.seq_len, valid_keys(b));
  CHECK(max_abs_diff(m.encode_prefix(b, 6).value(), h.value()) == 0.0);
}

TEST_CASE("MoL replaces the ffn only in the last application of its group") {
  RecursiveEncoder m(small(4, 2, {2}), 1);
  randomise(m, 4);
  const TokenBatch b = random_batch(2, 5, 20, 5);
  ForwardTrace trace;
  const Tensord full = m.encode_prefix(b, 4, &trace).value();
  REQUIRE(trace.routing.size() == 1);
  CHECK(trace.routing[0].layer == 4);
  CHECK(trace.routing[0].group == 2);

  // Layers 1-3 are blind to the experts; layer 4 is not.
  const Tensord prefix = m.encode_prefix(b, 3).value();
  auto& mol = std::get<MolLayer<double>>(m.extension(2));
  for (auto& e : mol.experts) e.b1.mutable_value().data().array() += 1.0;
  CHECK(m.encode_prefix(b, 3).value() == prefix);
  CHECK_FALSE(m.encode_prefix(b, 4).value() == full);
}

TEST_CASE("construction is deterministic in the seed") {
  const RecursiveEncoder a(small(4, 2, {1, 2}), 42);
  const RecursiveEncoder b(small(4, 2, {1, 2}), 42);
  const RecursiveEncoder c(small(4, 2, {1, 2}), 43);
  const auto pa = a.named_parameters(), pb = b.named_parameters(), pc = c.named_parameters();
  REQUIRE(pa.size() == pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(pa[i].var.value() == pb[i].var.value());
    any_diff = any_diff || !(pa[i].var.value() == pc[i].var.value());
  }
  CHECK(any_diff);
}

TEST_CASE("clone shares no storage") {
  const RecursiveEncoder a(small(4, 2, {2}), 1);
  RecursiveEncoder b = a.clone();
  b.embedding().mutable_value()[0] += 1.0;
  CHECK_FALSE(a.embedding().value() == b.embedding().value());
}

TEST_CASE("forward_mlm shape and input validation") {
  const RecursiveEncoder m(small(4, 2, {2}), 1);
  const Tensord logits = m.forward_mlm({3, 4, 5, 0, 0});
  CHECK(logits.shape() == Shape{5, 20});
  CHECK_THROWS_AS(m.forward_mlm({3, 20}), InputError);
  CHECK_THROWS_AS(m.forward_mlm({3, -1}), InputError);
  CHECK_THROWS_AS(m.forward_mlm(std::vector<Index>(17, 3)), InputError);
}

TEST_CASE("layers in one group compute the same map") {
  const RecursiveEncoder m(small(4, 2), 1);
  randomise(m, 6);
  const TokenBatch b = random_batch(1, 6, 20, 7);
  const RopeConfig rope = m.config().rope();
  const Vard h = m.encode_prefix(b, 1);
  // Layer 2 applied to h is group 1 again; it equals the explicit group-1 map.
  const Tensord l2 = m.encode_prefix(b, 2).value();
  CHECK(encoder_layer_forward(h, m.group(1), rope, 6, valid_keys(b)).value() == l2);
}

TEST_CASE("mutating a group affects exactly its applications") {
  RecursiveEncoder m(small(6, 3), 1);
  randomise(m, 8);
  const TokenBatch b = random_batch(1, 6, 20, 9);
  std::vector<Tensord> before;
  for (Index l = 1; l <= 6; ++l) before.push_back(m.encode_prefix(b, l).value());
  m.group(2).attn.w_v.mutable_value().data().array() += 0.5;
  for (Index l = 1; l <= 6; ++l) {
    CAPTURE(l);
    const bool same = m.encode_prefix(b, l).value() == before[static_cast<std::size_t>(l - 1)];
    CHECK(same == (l <= 2));
  }
}

TEST_CASE("end-to-end gradient check on a two-layer model") {
  ModelConfig c = small(2, 1, {1});
  c.d_model = 8;
  c.d_ff = 16;
  c.vocab_size = 12;
  c.max_seq = 8;
  GradCheckConfig g;
  g.seq_len = 5;
  g.batch_size = 3;
  const GradCheckReport r = grad_check(c, g);
  CHECK(r.pass);
  CHECK(r.worst()->rel_error < 1e-4);
}

TEST_CASE("count_params examples") {
  ModelConfig bert;
  bert.n_layers = 12;
  bert.n_groups = 12;
  bert.d_model = 768;
  bert.d_ff = 3072;
  bert.n_heads = 12;
  bert.geglu = false;
  CHECK(count_params(bert).approx_full == 84934656);
  CHECK(count_params(bert).block_ratio == 1.0);
  CHECK(count_params(bert).ratio == 1.0);

  ModelConfig k3 = bert;
  k3.n_groups = 3;
  const ParamReport r = count_params(k3);
  CHECK(r.block_ratio == 0.25);
  CHECK(r.block_unique * 4 == r.block_full);
  CHECK(r.ratio == static_cast<double>(r.unique_params) / static_cast<double>(r.full_equivalent_params));
}

TEST_CASE("count_params matches the instantiated model") {
  std::vector<ModelConfig> cfgs{small(4, 2), small(4, 2, {2}), small(6, 3, {1, 3}), small(4, 4, {1, 2, 3, 4})};
  ModelConfig moa = small(4, 2, {1, 2});
  moa.conditional = ConditionalKind::moa;
  cfgs.push_back(moa);
  ModelConfig merged = small(4, 2, {2});
  merged.merged = true;
  cfgs.push_back(merged);
  ModelConfig plain = small(4, 2, {2});
  plain.geglu = false;
  cfgs.push_back(plain);
  for (const auto& c : cfgs) {
    const RecursiveEncoder m(c, 0);
    CHECK(count_params(c).unique_params == m.parameter_count());
  }
}

TEST_CASE("teacher init with G = 1 reproduces the teacher") {
  const ModelConfig c = small(3, 3, {1, 3});
  RecursiveEncoder teacher(teacher_config(c), 10);
  randomise(teacher, 11);
  RecursiveEncoder student(c, 12);
  init_from_teacher(student, teacher);
  const std::vector<Index> ids{3, 7, 9, 4, 0};
  CHECK(student.forward_mlm(ids) == teacher.forward_mlm(ids));
}

TEST_CASE("teacher init with G = 2 maps group g to teacher layer 2g-1") {
  const ModelConfig c = small(4, 2, {1, 2});
  RecursiveEncoder teacher(teacher_config(c), 13);
  randomise(teacher, 14);
  RecursiveEncoder student(c, 15);
  randomise(student, 16);
  init_from_teacher(student, teacher);
  std::mt19937_64 rng(17);
  const auto h = Vard::constant(Tensord::randn(Shape{6, 16}, rng));
  const RopeConfig rope = c.rope();
  for (Index g : {1, 2}) {
    const Tensord s = encoder_layer_forward(h, student.group(g), rope, 6).value();
    const Tensord t = encoder_layer_forward(h, teacher.group(2 * g - 1), rope, 6).value();
    CHECK(s == t);
  }
  // Identity deltas: the MoL output equals the shared FFN.
  const auto& mol = std::get<MolLayer<double>>(student.extension(2));
  const Tensord y = mol_forward(h, mol, student.group(2).ffn).value();
  CHECK(max_abs_diff(y, ffn_forward(h, student.group(2).ffn).value()) <= 1e-15);
  CHECK(mol.router.weight.value() == Tensord::zeros(mol.router.weight.shape()));
}

TEST_CASE("teacher init selectors") {
  const ModelConfig c = small(4, 2);
  RecursiveEncoder teacher(teacher_config(c), 18);
  randomise(teacher, 19);
  RecursiveEncoder mid(c, 20);
  init_from_teacher(mid, teacher, TeacherSelector::middle);
  CHECK(mid.group(1).attn.w_q.value() == teacher.group(2).attn.w_q.value());
  CHECK(mid.group(2).attn.w_q.value() == teacher.group(4).attn.w_q.value());
  RecursiveEncoder avg(c, 21);
  init_from_teacher(avg, teacher, TeacherSelector::average);
  Tensord expect = teacher.group(3).ffn.w_up.value();
  expect.data() = (expect.data() + teacher.group(4).ffn.w_up.value().data()) / 2.0;
  CHECK(max_abs_diff(avg.group(2).ffn.w_up.value(), expect) == 0.0);
}

TEST_CASE("teacher init rejects mismatched geometry") {
  const ModelConfig c = small(4, 2);
  ModelConfig wide = teacher_config(c);
  wide.d_model = 32;
  wide.d_ff = 64;
  const RecursiveEncoder teacher(wide, 1);
  RecursiveEncoder student(c, 2);
  try {
    init_from_teacher(student, teacher);
    FAIL("expected InputError");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).find("embedding") != std::string::npos);
  }
  const RecursiveEncoder shallow(teacher_config(small(2, 1)), 3);
  CHECK_THROWS_AS(init_from_teacher(student, shallow), InputError);
}
