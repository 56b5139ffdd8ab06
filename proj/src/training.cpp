#include "mol/training.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "mol/config.hpp"

namespace mol {

using nlohmann::json;

void MaskingConfig::validate(Index vocab_size) const {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(mask_rate)) throw ConfigError("masking.mask_rate must be in [0, 1]");
  if (!in_unit(mask_prob) || !in_unit(random_prob) || !in_unit(keep_prob)) {
    throw ConfigError("masking: replacement probabilities must be in [0, 1]");
  }
  if (std::abs(mask_prob + random_prob + keep_prob - 1.0) > 1e-9) {
    throw ConfigError("masking: mask_prob + random_prob + keep_prob must sum to 1");
  }
  if (mask_token_id < 0 || mask_token_id >= vocab_size) {
    throw ConfigError("masking.mask_token_id " + std::to_string(mask_token_id) + " outside vocab of size " +
                      std::to_string(vocab_size));
  }
  if (random_prob > 0 && vocab_size <= 3) throw ConfigError("masking: random replacement needs non-reserved tokens");
}

MaskedSequence mask_tokens(const Sequence& ids, const MaskingConfig& cfg, Index vocab_size, std::mt19937_64& rng) {
  if (ids.empty()) throw InputError("mask_tokens: empty sequence");
  cfg.validate(vocab_size);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  MaskedSequence out;
  out.ids = ids;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == kPadId) continue;
    if (unit(rng) >= cfg.mask_rate) continue;
    out.positions.push_back(static_cast<Index>(i));
    out.labels.push_back(ids[i]);
    const double u = unit(rng);
    if (u < cfg.mask_prob) {
      out.ids[i] = cfg.mask_token_id;
    } else if (u < cfg.mask_prob + cfg.random_prob) {
      std::uniform_int_distribution<Index> pick(3, vocab_size - 1);
      out.ids[i] = pick(rng);
    }
  }
  return out;
}

MaskedSequence mask_tokens(const Sequence& ids, const MaskingConfig& cfg, Index vocab_size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return mask_tokens(ids, cfg, vocab_size, rng);
}

std::optional<Vard> mlm_loss(const Vard& logits, const std::vector<Index>& positions,
                             const std::vector<Index>& labels) {
  if (positions.size() != labels.size()) {
    throw DimensionError("mlm_loss: " + std::to_string(positions.size()) + " positions for " +
                         std::to_string(labels.size()) + " labels");
  }
  if (positions.empty()) return std::nullopt;
  return cross_entropy(gather_rows(logits, positions), labels);
}

void DistillConfig::validate() const {
  if (!(temperature > 0)) throw ConfigError("distill.temperature must be > 0");
  if (lambda < 0 || lambda > 1) throw ConfigError("distill.lambda must be in [0, 1]");
}

Vard distill_loss(const Vard& student_logits, const Tensord& teacher_logits, const DistillConfig& cfg) {
  cfg.validate();
  return distill_kl(student_logits, teacher_logits, cfg.temperature);
}

void AdamWConfig::validate() const {
  if (!(peak_lr >= 0)) throw ConfigError("peak_lr must be >= 0");
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
  if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
  if (warmup_steps > total_steps) throw ConfigError("warmup_steps exceeds total steps");
  if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("betas must be in [0, 1)");
  if (!(eps > 0)) throw ConfigError("eps must be > 0");
}

double lr_at_step(std::int64_t step, const AdamWConfig& cfg) {
  if (step <= 0) return 0.0;
  if (step >= cfg.total_steps) return 0.0;
  if (step < cfg.warmup_steps) return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  const double span = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return cfg.peak_lr * static_cast<double>(cfg.total_steps - step) / span;
}

double adamw_step(const std::vector<NamedParameter>& params, OptimState& state) {
  const AdamWConfig& cfg = state.cfg;
  double sq = 0;
  for (const auto& p : params) {
    if (!p.trainable) continue;
    const Tensord g = p.var.grad();
    if (!g.all_finite()) throw NumericError("non-finite gradient in '" + p.name + "'");
    sq += g.data().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  const double clip = (cfg.max_grad_norm > 0 && norm > cfg.max_grad_norm) ? cfg.max_grad_norm / norm : 1.0;

  const std::int64_t t = state.step + 1;
  const double lr = lr_at_step(t, cfg);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (const auto& p : params) {
    if (!p.trainable) continue;
    Tensord g = p.var.grad();
    g.data() *= clip;
    auto it = state.moments.find(p.name);
    if (it == state.moments.end()) {
      it = state.moments.emplace(p.name, Moments{Tensord(g.shape()), Tensord(g.shape())}).first;
    }
    auto& m = it->second.m.data();
    auto& v = it->second.v.data();
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g.data();
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.data().cwiseProduct(g.data());
    auto& w = p.var.mutable_value().data();
    if (p.decay && cfg.weight_decay > 0) w *= 1.0 - lr * cfg.weight_decay;
    w.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.eps);
  }
  state.step = t;
  return norm;
}

MaskedBatch make_masked_batch(const std::vector<Sequence>& seqs, const MaskingConfig& cfg, Index vocab_size,
                              std::mt19937_64& rng) {
  if (seqs.empty()) throw InputError("make_masked_batch: no sequences");
  MaskedBatch b;
  b.tokens.seq_len = static_cast<Index>(seqs.front().size());
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    if (static_cast<Index>(seqs[s].size()) != b.tokens.seq_len) {
      throw DimensionError("make_masked_batch: sequence " + std::to_string(s) + " has length " +
                           std::to_string(seqs[s].size()) + ", expected " + std::to_string(b.tokens.seq_len));
    }
    const MaskedSequence m = mask_tokens(seqs[s], cfg, vocab_size, rng);
    b.tokens.ids.insert(b.tokens.ids.end(), m.ids.begin(), m.ids.end());
    for (std::size_t i = 0; i < m.positions.size(); ++i) {
      b.rows.push_back(static_cast<Index>(s) * b.tokens.seq_len + m.positions[i]);
      b.labels.push_back(m.labels[i]);
    }
  }
  return b;
}

std::optional<Objective> compute_objective(const RecursiveEncoder& model, const MaskedBatch& batch,
                                           const ObjectiveConfig& cfg, const RecursiveEncoder* teacher) {
  if (batch.rows.empty()) return std::nullopt;
  if (!cfg.use_distill) return compute_objective(model, batch, cfg, static_cast<const Tensord*>(nullptr));
  if (!teacher) throw UsageError("distillation enabled without a teacher model");
  const Tensord target = teacher->logits_at(teacher->encode(batch.tokens), batch.rows).value();
  return compute_objective(model, batch, cfg, &target);
}

std::optional<Objective> compute_objective(const RecursiveEncoder& model, const MaskedBatch& batch,
                                           const ObjectiveConfig& cfg, const Tensord* teacher_logits) {
  if (batch.rows.empty()) return std::nullopt;
  Objective obj;
  const Vard hidden = model.encode(batch.tokens, &obj.trace);
  const Vard logits = model.logits_at(hidden, batch.rows);
  const Vard mlm = cross_entropy(logits, batch.labels);
  obj.mlm = mlm.value().item();
  Vard total = mlm;

  if (cfg.use_distill) {
    if (!teacher_logits) throw UsageError("distillation enabled without teacher logits");
    const Vard kd = distill_loss(logits, *teacher_logits, cfg.distill);
    obj.distill = kd.value().item();
    total = add(scale(mlm, 1.0 - cfg.distill.lambda), scale(kd, cfg.distill.lambda));
  }

  Vard aux;
  for (const auto& layer : obj.trace.routing) {
    if (!layer.trace.probs.defined()) continue;
    obj.routing_entropy.push_back(routing_entropy(layer.trace.probs.value()));
    if (layer.trace.probs.value().cols() < 2 || layer.trace.selected.empty()) continue;
    const Vard lb = load_balance_loss(layer.trace.probs, layer.trace.selected);
    aux = aux.defined() ? add(aux, lb) : lb;
  }
  if (aux.defined()) {
    obj.aux = aux.value().item();
    if (cfg.aux_loss_coef > 0) total = add(total, scale(aux, cfg.aux_loss_coef));
  }
  obj.total = total;
  return obj;
}

std::string to_json_line(const MetricsRecord& r) {
  const json j = {{"step", r.step},
                  {"lr", r.lr},
                  {"loss", r.loss},
                  {"mlm_loss", r.mlm_loss},
                  {"distill_loss", r.distill_loss},
                  {"aux_loss", r.aux_loss},
                  {"routing_entropy_per_mol_layer", r.routing_entropy}};
  return j.dump();
}

std::mt19937_64 step_rng(std::uint64_t seed, std::int64_t step, std::uint64_t stream) {
  const auto s = static_cast<std::uint64_t>(step);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

Checkpoint training_checkpoint(const RecursiveEncoder& model, const OptimState& state, const json& meta) {
  Checkpoint ckpt = to_checkpoint(model);
  for (const auto& [k, v] : meta.items()) ckpt.meta[k] = v;
  ckpt.meta["step"] = state.step;
  ckpt.meta["optimizer"] = to_json(state.cfg);
  for (const auto& p : model.named_parameters()) {
    const auto it = state.moments.find(p.name);
    if (it == state.moments.end()) continue;
    ckpt.tensors.push_back({"optim.m." + p.name, it->second.m});
    ckpt.tensors.push_back({"optim.v." + p.name, it->second.v});
  }
  return ckpt;
}

void restore_optimizer(const Checkpoint& ckpt, OptimState& state) {
  if (!ckpt.meta.contains("step")) throw InputError("checkpoint has no optimiser step; not a training checkpoint");
  state.step = ckpt.meta.at("step").get<std::int64_t>();
  state.moments.clear();
  for (const auto& t : ckpt.tensors) {
    if (t.name.rfind("optim.m.", 0) != 0) continue;
    const std::string name = t.name.substr(8);
    const Tensord* v = ckpt.find("optim.v." + name);
    if (!v) throw InputError("checkpoint: optim.v." + name + " missing");
    state.moments[name] = Moments{t.tensor, *v};
  }
}

namespace {

std::vector<Sequence> sample_batch(const Corpus& corpus, Index batch_size, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  std::vector<Sequence> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  for (Index i = 0; i < batch_size; ++i) out.push_back(corpus[pick(rng)]);
  return out;
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::int64_t step) {
  std::ostringstream name;
  name << "step_" << std::setw(6) << std::setfill('0') << step << ".ckpt";
  return dir / name.str();
}

}  // namespace

TrainResult train_loop(RecursiveEncoder& model, const Corpus& phase1, const Corpus* phase2, const TrainConfig& cfg,
                       OptimState& state, const RecursiveEncoder* teacher, const TrainIO& io) {
  if (phase1.empty()) throw InputError("train_loop: phase-1 corpus is empty");
  if (phase2 && phase2->empty()) throw InputError("train_loop: phase-2 corpus is empty");
  cfg.masking.validate(model.config().vocab_size);
  TrainResult result;
  const auto params = model.named_parameters();

  auto save = [&](std::int64_t step) {
    if (!io.checkpoint_dir) return;
    const auto path = checkpoint_path(*io.checkpoint_dir, step);
    write_checkpoint(path, training_checkpoint(model, state, io.run_meta));
    result.last_checkpoint = path;
  };

  for (std::int64_t s = state.step + 1; s <= cfg.steps; ++s) {
    const Corpus& corpus = (phase2 && s > cfg.phase1_steps) ? *phase2 : phase1;
    std::mt19937_64 rng = step_rng(cfg.seed, s);
    const MaskedBatch batch =
        make_masked_batch(sample_batch(corpus, cfg.batch_size, rng), cfg.masking, model.config().vocab_size, rng);
    const auto obj = compute_objective(model, batch, cfg.objective, teacher);
    if (!obj) {
      state.step = s;
      continue;
    }
    const double loss = obj->total.value().item();
    if (!std::isfinite(loss)) throw NumericError("non-finite loss at step " + std::to_string(s));

    for (const auto& p : params) p.var.zero_grad();
    backward(obj->total);
    MetricsRecord rec;
    rec.step = s;
    rec.lr = lr_at_step(s, state.cfg);
    adamw_step(params, state);
    rec.loss = loss;
    rec.mlm_loss = obj->mlm;
    rec.distill_loss = obj->distill;
    rec.aux_loss = obj->aux;
    rec.routing_entropy = obj->routing_entropy;
    if (io.metrics) *io.metrics << to_json_line(rec) << '\n' << std::flush;
    result.records.push_back(std::move(rec));

    if (cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0 && s != cfg.steps) save(s);
  }
  save(state.step);
  return result;
}

EvalResult evaluate(const RecursiveEncoder& model, const Corpus& corpus, const MaskingConfig& masking,
                    std::uint64_t seed, Index batch_size) {
  if (corpus.empty()) throw InputError("evaluate: corpus is empty");
  if (batch_size < 1) throw ConfigError("evaluate: batch_size must be >= 1");
  EvalResult out;
  double total = 0;
  struct Acc {
    Index group = 0;
    std::vector<double> counts;
    double entropy = 0;
    std::int64_t tokens = 0;
  };
  std::map<Index, Acc> usage;  // by layer depth

  std::int64_t batch_index = 0;
  for (std::size_t start = 0; start < corpus.size(); start += static_cast<std::size_t>(batch_size), ++batch_index) {
    const std::size_t end = std::min(corpus.size(), start + static_cast<std::size_t>(batch_size));
    const std::vector<Sequence> seqs(corpus.begin() + static_cast<std::ptrdiff_t>(start),
                                     corpus.begin() + static_cast<std::ptrdiff_t>(end));
    std::mt19937_64 rng = step_rng(seed, batch_index, 1);
    const MaskedBatch batch = make_masked_batch(seqs, masking, model.config().vocab_size, rng);
    ForwardTrace trace;
    const Vard hidden = model.encode(batch.tokens, &trace);
    if (!batch.rows.empty()) {
      const Vard ce = cross_entropy(model.logits_at(hidden, batch.rows), batch.labels);
      total += ce.value().item() * static_cast<double>(batch.rows.size());
      out.labelled += static_cast<std::int64_t>(batch.rows.size());
    }
    for (const auto& layer : trace.routing) {
      if (layer.trace.selected.empty()) continue;
      const Tensord& p = layer.trace.probs.value();
      Acc& acc = usage[layer.layer];
      acc.group = layer.group;
      acc.counts.resize(static_cast<std::size_t>(p.cols()), 0.0);
      for (Index t = 0; t < p.rows(); ++t) {
        if (batch.tokens.ids[static_cast<std::size_t>(t)] == kPadId) continue;
        for (Index e : layer.trace.selected[static_cast<std::size_t>(t)]) acc.counts[static_cast<std::size_t>(e)] += 1;
        for (Index e = 0; e < p.cols(); ++e)
          if (p.at(t, e) > 0) acc.entropy -= p.at(t, e) * std::log(p.at(t, e));
        ++acc.tokens;
      }
    }
  }
  if (out.labelled == 0) throw InputError("evaluate: no labelled positions; raise mask_rate or corpus size");
  out.loss = total / static_cast<double>(out.labelled);
  out.perplexity = std::exp(out.loss);
  for (auto& [layer, acc] : usage) {
    EvalResult::LayerUsage u;
    u.group = acc.group;
    double slots = 0;
    for (double c : acc.counts) slots += c;
    for (double c : acc.counts) u.histogram.push_back(slots > 0 ? c / slots : 0.0);
    u.entropy = acc.tokens ? acc.entropy / static_cast<double>(acc.tokens) : 0.0;
    out.usage.push_back(std::move(u));
  }
  return out;
}

}  // namespace mol
