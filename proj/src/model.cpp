#include "mol/model.hpp"

#include <algorithm>
#include <random>
#include <sstream>

#include "mol/merging.hpp"

namespace mol {

bool ModelConfig::has_conditional(Index group) const {
  return std::find(mol_groups.begin(), mol_groups.end(), group) != mol_groups.end();
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (n_groups < 1) fail("n_groups must be >= 1");
  if (n_layers % n_groups != 0) {
    fail("n_layers (" + std::to_string(n_layers) + ") is not divisible by n_groups (" + std::to_string(n_groups) +
         ")");
  }
  if (d_model < 2 || d_ff < 1) fail("d_model must be >= 2 and d_ff >= 1");
  if (n_heads < 1 || d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (head_dim() % 2 != 0) fail("head_dim (d_model / n_heads) must be even for rotary embeddings");
  if (vocab_size < 4) fail("vocab_size must be >= 4");
  if (max_seq < 1) fail("max_seq must be >= 1");
  for (Index g : mol_groups) {
    if (g < 1 || g > n_groups) {
      fail("mol group index " + std::to_string(g) + " outside [1, " + std::to_string(n_groups) + "]");
    }
  }
  std::vector<Index> sorted = mol_groups;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) fail("duplicate mol group index");
  if (!mol_groups.empty()) {
    if (n_experts < 1) fail("n_experts must be >= 1");
    if (top_k < 1 || top_k > n_experts) fail("top_k must be in [1, n_experts]");
    if (lora_rank < 1) fail("lora_rank must be >= 1");
    if (lora_rank * 4 > std::min(d_model, d_ff)) fail("lora_rank must be <= min(d_model, d_ff) / 4");
    if (!(lora_alpha > 0)) fail("lora_alpha must be > 0");
    if (merged && conditional != ConditionalKind::mol) fail("merged checkpoints only exist for MoL");
  }
  if (!(rope_base > 0)) fail("rope_base must be > 0");
  if (!(norm_eps > 0)) fail("norm_eps must be > 0");
  if (!(init_std > 0)) fail("init_std must be > 0");
}

ParamReport count_params(const ModelConfig& cfg) {
  cfg.validate();
  const std::int64_t d = cfg.d_model, f = cfg.d_ff, V = cfg.vocab_size;
  const std::int64_t K = cfg.n_groups, N = cfg.n_layers;
  const std::int64_t E = cfg.n_experts, r = cfg.lora_rank;
  const std::int64_t block = 4 * d * d + (cfg.geglu ? 3 : 2) * d * f + 4 * d;
  std::int64_t extra = 0;
  if (cfg.conditional == ConditionalKind::moa) {
    extra = E * 2 * d * cfg.moa_bottleneck() + d * E;
  } else if (cfg.merged) {
    extra = E * r * 2 * (d + f);
  } else {
    extra = E * 2 * r * (d + f) + d * E;
  }
  const std::int64_t conditional = extra * static_cast<std::int64_t>(cfg.mol_groups.size());
  const std::int64_t rest = V * d + conditional + 2 * d;

  ParamReport rep;
  rep.block_unique = K * block;
  rep.block_full = N * block;
  rep.block_ratio = static_cast<double>(rep.block_unique) / static_cast<double>(rep.block_full);
  rep.unique_params = rest + rep.block_unique;
  rep.full_equivalent_params = rest + rep.block_full;
  rep.ratio = static_cast<double>(rep.unique_params) / static_cast<double>(rep.full_equivalent_params);
  rep.approx_unique = 12 * K * d * d;
  rep.approx_full = 12 * N * d * d;
  rep.breakdown = {{"embedding", V * d},
                   {"blocks", rep.block_unique},
                   {"conditional", conditional},
                   {"final_norm", 2 * d}};
  return rep;
}

namespace {

Vard normal_param(Shape shape, std::mt19937_64& rng, double std) {
  return Vard::parameter(Tensord::randn(std::move(shape), rng, std));
}

Vard zeros_param(Shape shape) { return Vard::parameter(Tensord::zeros(std::move(shape))); }

LayerNormParams<double> make_norm(Index d, double eps) {
  return {Vard::parameter(Tensord::ones(Shape{d})), zeros_param(Shape{d}), eps};
}

}  // namespace

RecursiveEncoder::RecursiveEncoder(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const Index d = cfg_.d_model, f = cfg_.d_ff, r = cfg_.lora_rank, E = cfg_.n_experts;
  const double s = cfg_.init_std;

  embedding_ = normal_param(Shape{cfg_.vocab_size, d}, rng, s);
  for (Index g = 1; g <= cfg_.n_groups; ++g) {
    SharedBlockParams<double> b;
    b.attn_norm = make_norm(d, cfg_.norm_eps);
    b.attn.w_q = normal_param(Shape{d, d}, rng, s);
    b.attn.w_k = normal_param(Shape{d, d}, rng, s);
    b.attn.w_v = normal_param(Shape{d, d}, rng, s);
    b.attn.w_o = normal_param(Shape{d, d}, rng, s);
    b.attn.n_heads = cfg_.n_heads;
    b.ffn_norm = make_norm(d, cfg_.norm_eps);
    b.ffn.w_down = normal_param(Shape{d, f}, rng, s);
    if (cfg_.geglu) b.ffn.w_gate = normal_param(Shape{d, f}, rng, s);
    b.ffn.w_up = normal_param(Shape{f, d}, rng, s);
    groups_.push_back(std::move(b));

    GroupExtension ext;
    if (cfg_.has_conditional(g)) {
      if (cfg_.merged) {
        const Index er = E * r;
        StaticLora lora;
        lora.delta.a1 = zeros_param(Shape{d, er});
        lora.delta.b1 = zeros_param(Shape{er, f});
        lora.delta.a2 = zeros_param(Shape{f, er});
        lora.delta.b2 = zeros_param(Shape{er, d});
        lora.delta.scale = cfg_.lora_alpha / static_cast<double>(r);
        ext = std::move(lora);
      } else if (cfg_.conditional == ConditionalKind::mol) {
        MolLayer<double> mol;
        for (Index e = 0; e < E; ++e) {
          LoraExpert<double> x;
          x.a1 = normal_param(Shape{d, r}, rng, s);
          x.b1 = zeros_param(Shape{r, f});
          x.a2 = normal_param(Shape{f, r}, rng, s);
          x.b2 = zeros_param(Shape{r, d});
          x.rank = r;
          x.alpha = cfg_.lora_alpha;
          mol.experts.push_back(std::move(x));
        }
        mol.router.weight = zeros_param(Shape{d, E});
        mol.router.top_k = cfg_.top_k;
        mol.validate();
        ext = std::move(mol);
      } else {
        MoaLayer<double> moa;
        const Index bw = cfg_.moa_bottleneck();
        for (Index e = 0; e < E; ++e) {
          moa.adapters.push_back({normal_param(Shape{d, bw}, rng, s), zeros_param(Shape{bw, d})});
        }
        moa.router.weight = zeros_param(Shape{d, E});
        moa.router.top_k = cfg_.top_k;
        ext = std::move(moa);
      }
    }
    ext_.push_back(std::move(ext));
    merge_w_.emplace_back();
  }
  final_norm_ = make_norm(d, cfg_.norm_eps);
}

RecursiveEncoder RecursiveEncoder::clone() const {
  RecursiveEncoder out(cfg_, 0);
  std::map<std::string, Tensord> values;
  for (const auto& p : named_parameters()) values.emplace(p.name, p.var.value());
  out.assign(values);
  out.merge_w_ = merge_w_;
  for (Index g = 1; g <= cfg_.n_groups; ++g) {
    auto frozen_of = [](const GroupExtension& e) {
      if (auto* m = std::get_if<MolLayer<double>>(&e)) return m->router.frozen;
      if (auto* m = std::get_if<MoaLayer<double>>(&e)) return m->router.frozen;
      return false;
    };
    const bool frozen = frozen_of(extension(g));
    if (auto* m = std::get_if<MolLayer<double>>(&out.extension(g))) m->router.frozen = frozen;
    if (auto* m = std::get_if<MoaLayer<double>>(&out.extension(g))) m->router.frozen = frozen;
  }
  return out;
}

std::vector<NamedParameter> RecursiveEncoder::named_parameters() const {
  std::vector<NamedParameter> out;
  auto push = [&](std::string name, const Vard& v, bool decay = true, bool trainable = true) {
    out.push_back({std::move(name), v, trainable, decay});
  };
  push("embedding", embedding_);
  for (Index g = 1; g <= cfg_.n_groups; ++g) {
    const auto& b = group(g);
    const std::string p = "group." + std::to_string(g) + ".";
    push(p + "attn_norm.gain", b.attn_norm.gain, false);
    push(p + "attn_norm.bias", b.attn_norm.bias, false);
    push(p + "attn.w_q", b.attn.w_q);
    push(p + "attn.w_k", b.attn.w_k);
    push(p + "attn.w_v", b.attn.w_v);
    push(p + "attn.w_o", b.attn.w_o);
    push(p + "ffn_norm.gain", b.ffn_norm.gain, false);
    push(p + "ffn_norm.bias", b.ffn_norm.bias, false);
    push(p + "ffn.w_down", b.ffn.w_down);
    if (b.ffn.geglu()) push(p + "ffn.w_gate", b.ffn.w_gate);
    push(p + "ffn.w_up", b.ffn.w_up);
    const auto& ext = extension(g);
    if (const auto* mol = std::get_if<MolLayer<double>>(&ext)) {
      for (std::size_t e = 0; e < mol->experts.size(); ++e) {
        const auto& x = mol->experts[e];
        const std::string q = p + "mol.expert." + std::to_string(e) + ".";
        push(q + "a1", x.a1);
        push(q + "b1", x.b1);
        push(q + "a2", x.a2);
        push(q + "b2", x.b2);
      }
      push("router." + std::to_string(g) + ".weight", mol->router.weight, true, !mol->router.frozen);
    } else if (const auto* moa = std::get_if<MoaLayer<double>>(&ext)) {
      for (std::size_t e = 0; e < moa->adapters.size(); ++e) {
        const std::string q = p + "moa.adapter." + std::to_string(e) + ".";
        push(q + "down", moa->adapters[e].down);
        push(q + "up", moa->adapters[e].up);
      }
      push("router." + std::to_string(g) + ".weight", moa->router.weight, true, !moa->router.frozen);
    } else if (const auto* lora = std::get_if<StaticLora>(&ext)) {
      push(p + "lora.a1", lora->delta.a1);
      push(p + "lora.b1", lora->delta.b1);
      push(p + "lora.a2", lora->delta.a2);
      push(p + "lora.b2", lora->delta.b2);
    }
  }
  push("final_norm.gain", final_norm_.gain, false);
  push("final_norm.bias", final_norm_.bias, false);
  return out;
}

std::int64_t RecursiveEncoder::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : named_parameters()) n += p.var.value().numel();
  return n;
}

void RecursiveEncoder::assign(const std::map<std::string, Tensord>& values) {
  std::vector<std::string> problems;
  auto params = named_parameters();
  for (const auto& p : params) {
    auto it = values.find(p.name);
    if (it == values.end()) {
      problems.push_back(p.name + " missing");
    } else if (it->second.shape() != p.var.shape()) {
      problems.push_back(p.name + " " + shape_str(it->second.shape()) + " vs expected " + shape_str(p.var.shape()));
    }
  }
  if (values.size() != params.size()) {
    for (const auto& [name, _] : values) {
      const bool known = std::any_of(params.begin(), params.end(), [&](const auto& p) { return p.name == name; });
      if (!known) problems.push_back(name + " unexpected");
    }
  }
  if (!problems.empty()) {
    std::ostringstream os;
    os << "parameter assignment failed:";
    for (const auto& p : problems) os << "\n  " << p;
    throw InputError(os.str());
  }
  for (auto& p : params) p.var.mutable_value() = values.at(p.name);
}

void RecursiveEncoder::reset_conditional() {
  for (auto& ext : ext_) {
    if (auto* mol = std::get_if<MolLayer<double>>(&ext)) {
      for (auto& e : mol->experts) {
        e.b1.mutable_value().data().setZero();
        e.b2.mutable_value().data().setZero();
      }
      mol->router.weight.mutable_value().data().setZero();
    } else if (auto* moa = std::get_if<MoaLayer<double>>(&ext)) {
      for (auto& a : moa->adapters) a.up.mutable_value().data().setZero();
      moa->router.weight.mutable_value().data().setZero();
    }
  }
}

void RecursiveEncoder::set_router_frozen(bool frozen) {
  for (auto& ext : ext_) {
    if (auto* mol = std::get_if<MolLayer<double>>(&ext)) mol->router.frozen = frozen;
    if (auto* moa = std::get_if<MoaLayer<double>>(&ext)) moa->router.frozen = frozen;
  }
}

std::vector<Index> RecursiveEncoder::mol_groups() const {
  std::vector<Index> out;
  for (Index g = 1; g <= cfg_.n_groups; ++g)
    if (std::holds_alternative<MolLayer<double>>(extension(g))) out.push_back(g);
  return out;
}

void RecursiveEncoder::set_merge_weights(Index g, Tensord w) {
  const auto* mol = std::get_if<MolLayer<double>>(&extension(g));
  if (!mol) throw MergeError("group " + std::to_string(g) + " has no MoL layer to merge");
  if (w.numel() != mol->n_experts()) {
    throw MergeError("merge weights have " + std::to_string(w.numel()) + " entries for " +
                     std::to_string(mol->n_experts()) + " experts");
  }
  merge_w_.at(static_cast<std::size_t>(g - 1)) = std::move(w);
}

void RecursiveEncoder::clear_merge_weights() {
  for (auto& w : merge_w_) w.reset();
}

Vard RecursiveEncoder::ffn_sublayer(Index g, bool last_in_group, Index layer, const Vard& x,
                                    ForwardTrace* trace) const {
  const auto& shared = group(g).ffn;
  const auto& ext = extension(g);
  if (!last_in_group || std::holds_alternative<std::monostate>(ext)) return ffn_forward(x, shared);

  if (const auto* lora = std::get_if<StaticLora>(&ext)) return ffn_forward(x, shared, std::optional(lora->delta));

  if (const auto* mol = std::get_if<MolLayer<double>>(&ext)) {
    if (const auto& w = merge_weights(g)) {
      if (trace && trace->merged_router_stats) {
        LayerRouting lr{g, layer, {}};
        lr.trace.probs = router_probabilities(x, mol->router);
        trace->routing.push_back(std::move(lr));
      }
      return ffn_forward(x, shared, std::optional(merge_deltas(mol->experts, *w)));
    }
    if (!trace) return mol_forward(x, *mol, shared);
    LayerRouting lr{g, layer, {}};
    Vard out = mol_forward(x, *mol, shared, &lr.trace);
    trace->routing.push_back(std::move(lr));
    return out;
  }

  const auto& moa = std::get<MoaLayer<double>>(ext);
  if (!trace) return moa_forward(x, moa, shared);
  LayerRouting lr{g, layer, {}};
  Vard out = moa_forward(x, moa, shared, &lr.trace);
  trace->routing.push_back(std::move(lr));
  return out;
}

Vard RecursiveEncoder::encode_prefix(const TokenBatch& batch, Index layers, ForwardTrace* trace) const {
  if (batch.seq_len < 1 || batch.ids.empty() || static_cast<Index>(batch.ids.size()) % batch.seq_len != 0) {
    throw InputError("token batch of " + std::to_string(batch.ids.size()) + " ids is not a whole number of " +
                     std::to_string(batch.seq_len) + "-token sequences");
  }
  if (batch.seq_len > cfg_.max_seq) {
    throw InputError("sequence length " + std::to_string(batch.seq_len) + " exceeds max_seq " +
                     std::to_string(cfg_.max_seq));
  }
  std::vector<bool> key_valid(batch.ids.size());
  for (std::size_t i = 0; i < batch.ids.size(); ++i) {
    const Index id = batch.ids[i];
    if (id < 0 || id >= cfg_.vocab_size) {
      throw InputError("token id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(cfg_.vocab_size));
    }
    key_valid[i] = id != kPadId;
  }
  const RopeConfig rope = cfg_.rope();
  const Index G = cfg_.group_size();
  Vard h = gather_rows(embedding_, batch.ids);
  for (Index i = 1; i <= layers; ++i) {
    const Index g = group_of_layer(i);
    const bool last = (i % G) == 0;
    h = encoder_layer_forward(h, group(g), rope, batch.seq_len, key_valid,
                              [&](const Vard& x) { return ffn_sublayer(g, last, i, x, trace); });
  }
  return h;
}

Vard RecursiveEncoder::encode(const TokenBatch& batch, ForwardTrace* trace) const {
  return layer_norm(encode_prefix(batch, cfg_.n_layers, trace), final_norm_);
}

Vard RecursiveEncoder::logits(const Vard& hidden) const { return matmul(hidden, transpose(embedding_)); }

Vard RecursiveEncoder::logits_at(const Vard& hidden, const std::vector<Index>& rows) const {
  return logits(gather_rows(hidden, rows));
}

Tensord RecursiveEncoder::forward_mlm(const std::vector<Index>& token_ids) const {
  TokenBatch batch{token_ids, static_cast<Index>(token_ids.size())};
  return logits(encode(batch)).value();
}

ModelConfig teacher_config(const ModelConfig& student) {
  ModelConfig t = student;
  t.n_groups = student.n_layers;
  t.mol_groups.clear();
  t.merged = false;
  return t;
}

void init_from_teacher(RecursiveEncoder& student, const RecursiveEncoder& teacher, TeacherSelector selector) {
  const ModelConfig& sc = student.config();
  const ModelConfig& tc = teacher.config();
  std::vector<std::string> problems;
  if (tc.n_layers != sc.n_layers) {
    problems.push_back("depth: teacher " + std::to_string(tc.n_layers) + " vs student " +
                       std::to_string(sc.n_layers));
  }
  if (tc.n_groups != tc.n_layers) problems.push_back("teacher is not fully parameterised (n_groups != n_layers)");
  if (tc.geglu != sc.geglu) problems.push_back("geglu flag differs");
  auto check = [&](const std::string& name, const Vard& a, const Vard& b) {
    if (a.shape() != b.shape()) {
      problems.push_back(name + ": teacher " + shape_str(a.shape()) + " vs student " + shape_str(b.shape()));
    }
  };
  check("embedding", teacher.embedding(), student.embedding());
  check("final_norm.gain", teacher.final_norm().gain, student.final_norm().gain);
  if (problems.empty()) {
    const auto& tb = teacher.group(1);
    const auto& sb = student.group(1);
    check("attn.w_q", tb.attn.w_q, sb.attn.w_q);
    check("ffn.w_down", tb.ffn.w_down, sb.ffn.w_down);
    check("ffn.w_up", tb.ffn.w_up, sb.ffn.w_up);
    if (tc.n_heads != sc.n_heads) problems.push_back("n_heads differs");
  }
  if (!problems.empty()) {
    std::ostringstream os;
    os << "teacher initialisation failed:";
    for (const auto& p : problems) os << "\n  " << p;
    throw InputError(os.str());
  }

  auto blocks_of = [](const SharedBlockParams<double>& b) {
    std::vector<Vard> v{b.attn_norm.gain, b.attn_norm.bias, b.attn.w_q, b.attn.w_k, b.attn.w_v,
                        b.attn.w_o, b.ffn_norm.gain, b.ffn_norm.bias, b.ffn.w_down, b.ffn.w_up};
    if (b.ffn.geglu()) v.push_back(b.ffn.w_gate);
    return v;
  };

  const Index G = sc.group_size();
  for (Index g = 1; g <= sc.n_groups; ++g) {
    auto dst = blocks_of(student.group(g));
    const Index first = (g - 1) * G + 1;
    std::vector<Index> sources;
    switch (selector) {
      case TeacherSelector::first: sources = {first}; break;
      case TeacherSelector::middle: sources = {first + G / 2}; break;
      case TeacherSelector::average:
        for (Index i = 0; i < G; ++i) sources.push_back(first + i);
        break;
    }
    for (std::size_t k = 0; k < dst.size(); ++k) {
      Tensord acc = blocks_of(teacher.group(sources.front()))[k].value();
      for (std::size_t s = 1; s < sources.size(); ++s)
        acc.data() += blocks_of(teacher.group(sources[s]))[k].value().data();
      if (sources.size() > 1) acc.data() /= static_cast<double>(sources.size());
      dst[k].mutable_value() = std::move(acc);
    }
  }
  student.embedding().mutable_value() = teacher.embedding().value();
  student.final_norm().gain.mutable_value() = teacher.final_norm().gain.value();
  student.final_norm().bias.mutable_value() = teacher.final_norm().bias.value();
  student.reset_conditional();
}

}  // namespace mol
