#include "mol/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mol {

const TensorGradReport* GradCheckReport::worst() const {
  const TensorGradReport* w = nullptr;
  for (const auto& t : tensors)
    if (!w || t.rel_error > w->rel_error) w = &t;
  return w;
}

double relative_error(const Tensord& analytic, const Tensord& numeric) {
  const double diff = (analytic.data() - numeric.data()).norm();
  const double denom = std::max({analytic.data().norm(), numeric.data().norm(), std::numeric_limits<double>::min()});
  return diff == 0 ? 0.0 : diff / denom;
}

GradCheckReport check_gradients(const std::function<Vard()>& loss, const std::vector<NamedParameter>& params,
                                const GradCheckConfig& cfg) {
  for (const auto& p : params) p.var.zero_grad();
  backward(loss());
  std::vector<Tensord> analytic;
  for (const auto& p : params) {
    Tensord g = p.var.grad();
    if (cfg.inject_fault && *cfg.inject_fault == p.name) {
      for (Index i = 0; i < g.numel(); ++i) g[i] = g[i] * 1.01 + 1e-3;
    }
    analytic.push_back(std::move(g));
  }
  if (cfg.inject_fault) {
    const bool known = std::any_of(params.begin(), params.end(), [&](const auto& p) { return p.name == *cfg.inject_fault; });
    if (!known) throw ConfigError("inject_fault: no parameter named '" + *cfg.inject_fault + "'");
  }

  GradCheckReport report;
  report.tolerance = cfg.tolerance;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& p = params[k];
    Tensord& w = p.var.mutable_value();
    Tensord numeric(w.shape());
    for (Index i = 0; i < w.numel(); ++i) {
      const double orig = w[i];
      w[i] = orig + cfg.h;
      const double up = loss().value().item();
      w[i] = orig - cfg.h;
      const double down = loss().value().item();
      w[i] = orig;
      numeric[i] = (up - down) / (2 * cfg.h);
    }
    TensorGradReport t;
    t.name = p.name;
    t.numel = w.numel();
    t.rel_error = relative_error(analytic[k], numeric);
    t.max_abs_error = (analytic[k].data() - numeric.data()).cwiseAbs().maxCoeff();
    t.numeric_norm = numeric.data().norm();
    t.pass = t.rel_error < cfg.tolerance;
    report.pass = report.pass && t.pass;
    report.tensors.push_back(std::move(t));
  }
  return report;
}

GradCheckReport grad_check(const ModelConfig& model_cfg, const GradCheckConfig& cfg) {
  RecursiveEncoder model(model_cfg, cfg.seed);
  if (model.parameter_count() > kGradCheckMaxParams) {
    throw ConfigError("grad-check: model has " + std::to_string(model.parameter_count()) +
                      " parameters; finite differences are limited to " + std::to_string(kGradCheckMaxParams) +
                      " (reduce d_model, d_ff, vocab_size or n_groups)");
  }
  std::mt19937_64 rng(cfg.seed ^ 0x5bd1e995ULL);
  const auto params = model.named_parameters();
  for (const auto& p : params) {
    const double sd = p.name.rfind("router.", 0) == 0 ? cfg.router_std : cfg.param_std;
    Tensord v = Tensord::randn(p.var.shape(), rng, sd);
    if (p.name.find("norm.gain") != std::string::npos) v.data().array() += 1.0;
    p.var.mutable_value() = std::move(v);
  }

  std::optional<RecursiveEncoder> teacher;
  if (cfg.distill) {
    teacher.emplace(teacher_config(model_cfg), cfg.seed + 1);
    for (const auto& p : teacher->named_parameters()) {
      Tensord v = Tensord::randn(p.var.shape(), rng, cfg.param_std);
      if (p.name.find("norm.gain") != std::string::npos) v.data().array() += 1.0;
      p.var.mutable_value() = std::move(v);
    }
  }

  std::uniform_int_distribution<Index> tok(3, model_cfg.vocab_size - 1);
  std::vector<Sequence> seqs(static_cast<std::size_t>(cfg.batch_size));
  for (auto& s : seqs) {
    s.resize(static_cast<std::size_t>(cfg.seq_len));
    for (auto& id : s) id = tok(rng);
  }
  seqs.back().back() = kPadId;  // exercise the key-padding mask
  const MaskedBatch batch = make_masked_batch(seqs, cfg.masking, model_cfg.vocab_size, rng);
  if (batch.rows.empty()) throw InputError("grad-check: masking produced no labelled positions");

  ObjectiveConfig obj;
  obj.use_distill = cfg.distill;
  obj.distill = cfg.distill_cfg;
  obj.aux_loss_coef = cfg.aux_loss_coef;
  std::optional<Tensord> target;
  if (teacher) target = teacher->logits_at(teacher->encode(batch.tokens), batch.rows).value();
  const Tensord* t = target ? &*target : nullptr;
  auto loss = [&]() { return compute_objective(model, batch, obj, t)->total; };
  return check_gradients(loss, params, cfg);
}

nlohmann::json to_json(const GradCheckReport& report) {
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : report.tensors) {
    tensors.push_back({{"name", t.name},
                       {"numel", t.numel},
                       {"rel_error", t.rel_error},
                       {"max_abs_error", t.max_abs_error},
                       {"numeric_norm", t.numeric_norm},
                       {"pass", t.pass}});
  }
  const auto* w = report.worst();
  return {{"pass", report.pass},
          {"tolerance", report.tolerance},
          {"worst", w ? nlohmann::json(w->name) : nlohmann::json(nullptr)},
          {"worst_rel_error", w ? w->rel_error : 0.0},
          {"tensors", tensors}};
}

}  // namespace mol
