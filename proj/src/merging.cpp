#include "mol/merging.hpp"

#include <cmath>

#include "mol/config.hpp"

namespace mol {

using nlohmann::json;

LoraDelta<double> merge_deltas(const std::vector<LoraExpert<double>>& experts, const Tensord& w) {
  if (experts.empty()) throw MergeError("merge_deltas: no experts");
  if (w.numel() != static_cast<Index>(experts.size())) {
    throw MergeError("merge_deltas: " + std::to_string(w.numel()) + " weights for " +
                     std::to_string(experts.size()) + " experts");
  }
  for (Index j = 0; j < w.numel(); ++j) {
    if (!(w[j] >= 0)) throw MergeError("merge_deltas: weight " + std::to_string(j) + " is negative");
  }
  std::vector<Vard> a1, b1, a2, b2;
  for (std::size_t j = 0; j < experts.size(); ++j) {
    const auto& e = experts[j];
    if (e.rank != experts.front().rank || e.alpha != experts.front().alpha) {
      throw MergeError("merge_deltas: experts differ in rank or lora_alpha");
    }
    const double wj = w[static_cast<Index>(j)];
    a1.push_back(e.a1);
    b1.push_back(scale(e.b1, wj));
    a2.push_back(e.a2);
    b2.push_back(scale(e.b2, wj));
  }
  return {concat_cols(a1), concat_rows(b1), concat_cols(a2), concat_rows(b2), experts.front().scale()};
}

MergeState make_merge_state(Index n_experts, double ema_decay, bool router_frozen) {
  if (n_experts < 1) throw ConfigError("merge: n_experts must be >= 1");
  MergeState s;
  s.w = Tensord(Shape{n_experts}, 1.0 / static_cast<double>(n_experts));
  s.ema_decay = ema_decay;
  s.router_frozen = router_frozen;
  return s;
}

RoutingStats batch_routing_stats(const std::vector<Tensord>& per_sample_probs) {
  if (per_sample_probs.empty()) throw InputError("batch_routing_stats: empty batch");
  RoutingStats st;
  const Index e = per_sample_probs.front().cols();
  ColVector<double> acc = ColVector<double>::Zero(e);
  for (std::size_t i = 0; i < per_sample_probs.size(); ++i) {
    const Tensord& p = per_sample_probs[i];
    if (p.empty() || p.rows() < 1) throw InputError("batch_routing_stats: sample " + std::to_string(i) + " has no tokens");
    if (p.cols() != e) {
      throw DimensionError("batch_routing_stats: sample " + std::to_string(i) + " has " + std::to_string(p.cols()) +
                           " experts, expected " + std::to_string(e));
    }
    const ColVector<double> r = p.matrix().colwise().mean().transpose();
    acc += r;
    st.per_sample.push_back(Tensord(Shape{e}, r));
    st.tokens.push_back(p.rows());
  }
  st.batch_size = static_cast<Index>(per_sample_probs.size());
  st.batch_mean = Tensord(Shape{e}, ColVector<double>(acc / static_cast<double>(st.batch_size)));
  return st;
}

void ema_update(MergeState& state, const Tensord& batch_mean) {
  if (!(state.ema_decay > 0 && state.ema_decay < 1)) throw ConfigError("merge.ema_decay must be in (0, 1)");
  if (batch_mean.numel() != state.w.numel()) {
    throw DimensionError("ema_update: r_b has " + std::to_string(batch_mean.numel()) + " entries, w has " +
                         std::to_string(state.w.numel()));
  }
  const double a = state.ema_decay;
  state.w.data() = a * state.w.data() + (1.0 - a) * batch_mean.data();
  ++state.batches;
}

void MergeConfig::validate() const {
  if (!(ema_decay > 0 && ema_decay < 1)) throw ConfigError("ema_decay must be in (0, 1)");
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (freeze_threshold < 0) throw ConfigError("freeze_threshold must be >= 0");
  if (aux_loss_coef < 0) throw ConfigError("aux_loss_coef must be >= 0");
  optim.validate();
}

std::vector<MergeLayerReport> MergeResult::layers() const {
  std::vector<MergeLayerReport> out;
  for (const auto& [g, s] : states) out.push_back({g, std::vector<double>(s.w.data().begin(), s.w.data().end())});
  return out;
}

std::string to_string(MergeStrategy s) { return s == MergeStrategy::uniform ? "uniform" : "ema"; }

MergeStrategy parse_merge_strategy(const std::string& s) {
  if (s == "uniform") return MergeStrategy::uniform;
  if (s == "ema") return MergeStrategy::ema;
  throw ConfigError("unknown merge strategy '" + s + "' (expected uniform|ema)");
}

namespace {

// Router probabilities of one group split per sample, pad tokens dropped.
std::vector<Tensord> per_sample_probs(const Tensord& probs, const TokenBatch& batch) {
  std::vector<Tensord> out;
  const Index e = probs.cols();
  for (Index s = 0; s < batch.n_seq(); ++s) {
    std::vector<Index> rows;
    for (Index t = 0; t < batch.seq_len; ++t) {
      const Index row = s * batch.seq_len + t;
      if (batch.ids[static_cast<std::size_t>(row)] != kPadId) rows.push_back(row);
    }
    if (rows.empty()) continue;
    Tensord p(Shape{static_cast<Index>(rows.size()), e});
    for (std::size_t i = 0; i < rows.size(); ++i) p.matrix().row(static_cast<Index>(i)) = probs.matrix().row(rows[i]);
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<std::vector<Index>> topk_selection(const Tensord& probs, Index k) {
  std::vector<std::vector<Index>> sel;
  for (Index t = 0; t < probs.rows(); ++t) {
    const ColVector<double> p = probs.matrix().row(t).transpose();
    sel.push_back(topk_renormalised<double>(p, k).indices);
  }
  return sel;
}

}  // namespace

MergeResult finetune_merged(RecursiveEncoder& model, const Corpus& task, const MergeConfig& cfg) {
  cfg.validate();
  if (model.config().merged) {
    throw ConfigError("merge: model is already merged; routing statistics are unavailable");
  }
  const auto groups = model.mol_groups();
  if (groups.empty()) throw MergeError("no MoL layers");
  if (task.empty()) throw InputError("merge: task corpus is empty");
  cfg.masking.validate(model.config().vocab_size);

  bool frozen = true;
  switch (cfg.router) {
    case RouterPolicy::frozen: frozen = true; break;
    case RouterPolicy::trainable: frozen = false; break;
    case RouterPolicy::automatic: frozen = static_cast<std::int64_t>(task.size()) < cfg.freeze_threshold; break;
  }
  model.set_router_frozen(frozen);

  MergeResult result;
  result.strategy = cfg.strategy;
  result.router_frozen = frozen;
  for (Index g : groups) {
    const auto& mol = std::get<MolLayer<double>>(model.extension(g));
    MergeState st = make_merge_state(mol.n_experts(), cfg.ema_decay, frozen);
    model.set_merge_weights(g, st.w);
    result.states.emplace(g, std::move(st));
  }

  // Only the expert factors (and a trainable router) move.
  std::vector<NamedParameter> params = model.named_parameters();
  for (auto& p : params) {
    const bool expert = p.name.find(".mol.expert.") != std::string::npos;
    const bool router = p.name.rfind("router.", 0) == 0;
    p.trainable = expert || (router && !frozen);
  }

  OptimState optim;
  optim.cfg = cfg.optim;
  optim.cfg.total_steps = cfg.steps;
  const bool need_stats = cfg.strategy == MergeStrategy::ema || !frozen;

  for (std::int64_t s = 1; s <= cfg.steps; ++s) {
    std::mt19937_64 rng = step_rng(cfg.seed, s, 2);
    std::uniform_int_distribution<std::size_t> pick(0, task.size() - 1);
    std::vector<Sequence> seqs;
    for (Index i = 0; i < cfg.batch_size; ++i) seqs.push_back(task[pick(rng)]);
    const MaskedBatch batch = make_masked_batch(seqs, cfg.masking, model.config().vocab_size, rng);

    ForwardTrace trace;
    trace.merged_router_stats = need_stats;
    const Vard hidden = model.encode(batch.tokens, &trace);
    if (!batch.rows.empty()) {
      Vard total = cross_entropy(model.logits_at(hidden, batch.rows), batch.labels);
      if (!frozen && cfg.aux_loss_coef > 0) {
        for (const auto& layer : trace.routing) {
          const auto& mol = std::get<MolLayer<double>>(model.extension(layer.group));
          if (mol.n_experts() < 2) continue;
          const auto sel = topk_selection(layer.trace.probs.value(), mol.router.top_k);
          total = add(total, scale(load_balance_loss(layer.trace.probs, sel), cfg.aux_loss_coef));
        }
      }
      const double loss = total.value().item();
      if (!std::isfinite(loss)) throw NumericError("merge: non-finite loss at step " + std::to_string(s));
      for (const auto& p : params) p.var.zero_grad();
      backward(total);
      adamw_step(params, optim);
      result.losses.push_back(loss);
    }

    if (cfg.strategy == MergeStrategy::ema) {
      for (const auto& layer : trace.routing) {
        const auto samples = per_sample_probs(layer.trace.probs.value(), batch.tokens);
        if (samples.empty()) continue;
        MergeState& st = result.states.at(layer.group);
        ema_update(st, batch_routing_stats(samples).batch_mean);
        model.set_merge_weights(layer.group, st.w);
      }
    }
  }
  result.steps = cfg.steps;
  return result;
}

Checkpoint export_merged(const RecursiveEncoder& model) {
  const auto groups = model.mol_groups();
  if (groups.empty()) throw ExportError("no MoL layers to export");
  for (Index g : groups) {
    if (!model.merge_weights(g)) throw ExportError("group " + std::to_string(g) + " has not been merged");
  }
  ModelConfig cfg = model.config();
  cfg.merged = true;
  RecursiveEncoder merged(cfg, 0);

  std::map<std::string, Tensord> values;
  for (const auto& p : model.named_parameters()) values.emplace(p.name, p.var.value());
  for (Index g : groups) {
    const auto& mol = std::get<MolLayer<double>>(model.extension(g));
    const LoraDelta<double> d = merge_deltas(mol.experts, *model.merge_weights(g));
    const std::string p = "group." + std::to_string(g) + ".";
    for (Index e = 0; e < mol.n_experts(); ++e) {
      for (const char* f : {"a1", "b1", "a2", "b2"}) values.erase(p + "mol.expert." + std::to_string(e) + "." + f);
    }
    values.erase("router." + std::to_string(g) + ".weight");
    values.emplace(p + "lora.a1", d.a1.value());
    values.emplace(p + "lora.b1", d.b1.value());
    values.emplace(p + "lora.a2", d.a2.value());
    values.emplace(p + "lora.b2", d.b2.value());
  }
  merged.assign(values);
  Checkpoint ckpt = to_checkpoint(merged);
  json w = json::object();
  for (Index g : groups) {
    const Tensord& m = *model.merge_weights(g);
    w[std::to_string(g)] = std::vector<double>(m.data().begin(), m.data().end());
  }
  ckpt.meta["merged_from_weights"] = w;
  return ckpt;
}

json merge_report_json(const MergeResult& result) {
  json layers = json::array();
  for (const auto& l : result.layers()) {
    layers.push_back({{"layer", l.group}, {"w", l.w}, {"strategy", to_string(result.strategy)}, {"steps", result.steps}});
  }
  return {{"strategy", to_string(result.strategy)},
          {"steps", result.steps},
          {"router_frozen", result.router_frozen},
          {"layers", layers},
          {"final_loss", result.losses.empty() ? json(nullptr) : json(result.losses.back())}};
}

}  // namespace mol
