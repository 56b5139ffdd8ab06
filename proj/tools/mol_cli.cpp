#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "mol/checkpoint.hpp"
#include "mol/config.hpp"
#include "mol/data.hpp"
#include "mol/grad_check.hpp"
#include "mol/merging.hpp"
#include "mol/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum class Level { error = 0, info = 1, debug = 2 };

Level log_level() {
  const char* env = std::getenv("MOL_LOG_LEVEL");
  if (!env) return Level::info;
  const std::string v = env;
  if (v == "error") return Level::error;
  if (v == "debug") return Level::debug;
  return Level::info;
}

void log(Level lvl, const std::string& msg) {
  static const Level threshold = log_level();
  if (lvl > threshold) return;
  static const char* names[] = {"error", "info", "debug"};
  std::cerr << "[" << names[static_cast<int>(lvl)] << "] " << msg << '\n';
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  bool json_out = false;
};

void add_common(CLI::App* cmd, Common& c, bool config_required) {
  auto* opt = cmd->add_option("--config", c.config, "JSON run configuration");
  if (config_required) opt->required();
  cmd->add_option("--seed", c.seed, "override the configured seed");
  cmd->add_option("--threads", c.threads, "worker threads for Eigen kernels")->check(CLI::PositiveNumber);
  cmd->add_flag("--json", c.json_out, "machine-readable output");
}

void require_file(const std::optional<std::string>& path, const std::string& field) {
  if (!path || path->empty()) throw mol::ConfigError(field + ": required");
  if (!fs::exists(*path)) throw mol::ConfigError(field + ": no such file '" + *path + "'");
}

mol::RunConfig load_config(const Common& c) {
  mol::RunConfig cfg = c.config.empty() ? mol::RunConfig{} : mol::load_run_config(c.config);
  if (c.seed) {
    cfg.seed = c.seed;
    cfg.training.seed = *c.seed;
    cfg.merge.merge.seed = *c.seed;
  }
  Eigen::setNbThreads(c.threads);
  return cfg;
}

void check_vocab(const mol::Vocab& vocab, const mol::ModelConfig& model) {
  if (vocab.size() > model.vocab_size) {
    throw mol::InputError("vocab has " + std::to_string(vocab.size()) + " tokens but the model's vocab_size is " +
                          std::to_string(model.vocab_size));
  }
}

mol::Corpus load_corpus(const std::string& path, const mol::Vocab& vocab, mol::Index seq_len) {
  mol::Corpus corpus;
  for (const auto& line : mol::read_lines(path)) {
    if (mol::split_whitespace(line).empty()) continue;
    corpus.push_back(mol::encode(line, vocab, seq_len));
  }
  if (corpus.empty()) throw mol::InputError("corpus '" + path + "' has no documents");
  return corpus;
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << '\n';
}

std::optional<mol::RecursiveEncoder> load_teacher(const mol::RunConfig& cfg) {
  if (!cfg.teacher.checkpoint) return std::nullopt;
  require_file(cfg.teacher.checkpoint, "distill.teacher_checkpoint");
  mol::RecursiveEncoder teacher = mol::from_checkpoint(mol::read_checkpoint(*cfg.teacher.checkpoint));
  const auto& t = teacher.config();
  if (t.d_model != cfg.model.d_model || t.vocab_size != cfg.model.vocab_size || t.n_heads != cfg.model.n_heads) {
    throw mol::ConfigError("distill.teacher_checkpoint: teacher geometry (d_model " + std::to_string(t.d_model) +
                           ", vocab " + std::to_string(t.vocab_size) + ") does not match the student");
  }
  return teacher;
}

// pretrain and finetune share everything except the starting weights.
int cmd_train(const Common& common, bool finetune) {
  mol::RunConfig cfg = load_config(common);
  if (!cfg.seed) throw mol::ConfigError("seed: required (set it in the config or pass --seed)");
  require_file(cfg.data.vocab, "data.vocab");
  require_file(cfg.data.phase1_corpus, "data.phase1_corpus");
  if (cfg.data.phase2_corpus) require_file(cfg.data.phase2_corpus, "data.phase2_corpus");
  if (finetune) require_file(cfg.data.init_checkpoint, "data.init_checkpoint");
  if (cfg.resume_from) require_file(cfg.resume_from, "training.resume_from");

  const mol::Vocab vocab = mol::Vocab::load(*cfg.data.vocab);
  check_vocab(vocab, cfg.model);
  const mol::Corpus phase1 = load_corpus(*cfg.data.phase1_corpus, vocab, cfg.data.seq_len);
  std::optional<mol::Corpus> phase2;
  if (cfg.data.phase2_corpus) phase2 = load_corpus(*cfg.data.phase2_corpus, vocab, cfg.data.seq_len);

  std::optional<mol::RecursiveEncoder> teacher = load_teacher(cfg);
  mol::OptimState state;
  state.cfg = cfg.training.optim;

  const fs::path out_dir = cfg.output_dir;
  fs::create_directories(out_dir);
  write_json(out_dir / "config.resolved.json", mol::to_json(cfg));

  mol::RecursiveEncoder model(cfg.model, *cfg.seed);
  if (cfg.resume_from) {
    const mol::Checkpoint ckpt = mol::read_checkpoint(*cfg.resume_from);
    model = mol::from_checkpoint(ckpt);
    mol::restore_optimizer(ckpt, state);
    state.cfg = cfg.training.optim;
    log(Level::info, "resumed from " + *cfg.resume_from + " at step " + std::to_string(state.step));
  } else if (finetune) {
    model = mol::from_checkpoint(mol::read_checkpoint(*cfg.data.init_checkpoint));
  } else if (cfg.teacher.init_from_teacher) {
    mol::init_from_teacher(model, *teacher, cfg.teacher.selector);
    log(Level::info, "initialised shared blocks from teacher (" + mol::to_string(cfg.teacher.selector) + ")");
  }
  const mol::RecursiveEncoder* teacher_ptr = cfg.training.objective.use_distill ? &*teacher : nullptr;

  std::ofstream metrics(out_dir / "metrics.ndjson", cfg.resume_from ? std::ios::app : std::ios::trunc);
  mol::TrainIO io;
  io.metrics = &metrics;
  io.checkpoint_dir = out_dir / "checkpoints";
  io.run_meta = {{"seed", *cfg.seed}, {"command", finetune ? "finetune" : "pretrain"}};

  log(Level::info, "training " + std::to_string(model.parameter_count()) + " parameters for " +
                       std::to_string(cfg.training.steps) + " steps");
  const mol::TrainResult result =
      mol::train_loop(model, phase1, phase2 ? &*phase2 : nullptr, cfg.training, state, teacher_ptr, io);

  json summary = {{"steps", state.step},
                  {"checkpoint", result.last_checkpoint ? json(result.last_checkpoint->string()) : json(nullptr)},
                  {"metrics", (out_dir / "metrics.ndjson").string()}};
  if (!result.records.empty()) {
    summary["first_loss"] = result.records.front().loss;
    summary["final_loss"] = result.records.back().loss;
  }
  if (common.json_out) {
    std::cout << summary.dump() << '\n';
  } else {
    std::cout << "steps: " << state.step << '\n';
    if (!result.records.empty()) std::cout << "final loss: " << result.records.back().loss << '\n';
    if (result.last_checkpoint) std::cout << "checkpoint: " << result.last_checkpoint->string() << '\n';
  }
  return 0;
}

json eval_json(const mol::EvalResult& r) {
  json usage = json::array();
  for (const auto& u : r.usage) {
    usage.push_back({{"group", u.group}, {"histogram", u.histogram}, {"routing_entropy", u.entropy}});
  }
  return {{"loss", r.loss}, {"perplexity", r.perplexity}, {"labelled", r.labelled}, {"mol_layers", usage}};
}

struct EvalArgs {
  std::string checkpoint, corpus, vocab;
  mol::Index seq_len = 0;
};

int cmd_eval(const Common& common, const EvalArgs& a) {
  const mol::RunConfig cfg = load_config(common);
  require_file(a.checkpoint, "--checkpoint");
  require_file(a.corpus, "--corpus");
  const std::string vocab_path = a.vocab.empty() ? cfg.data.vocab.value_or("") : a.vocab;
  require_file(vocab_path, "--vocab");
  const mol::RecursiveEncoder model = mol::from_checkpoint(mol::read_checkpoint(a.checkpoint));
  const mol::Vocab vocab = mol::Vocab::load(vocab_path);
  check_vocab(vocab, model.config());
  const mol::Index seq_len = a.seq_len > 0 ? a.seq_len : cfg.data.seq_len;
  const mol::Corpus corpus = load_corpus(a.corpus, vocab, seq_len);
  const auto r = mol::evaluate(model, corpus, cfg.training.masking, cfg.seed.value_or(0));
  const json j = eval_json(r);
  if (common.json_out) {
    std::cout << j.dump() << '\n';
  } else {
    std::cout << std::setprecision(6) << "loss: " << r.loss << "\nperplexity: " << r.perplexity
              << "\nlabelled: " << r.labelled << '\n';
    for (const auto& u : r.usage) {
      std::cout << "group " << u.group << " usage:";
      for (double h : u.histogram) std::cout << ' ' << h;
      std::cout << "  entropy " << u.entropy << '\n';
    }
  }
  return 0;
}

struct MergeArgs {
  std::string checkpoint, corpus, eval_corpus, vocab, strategy, out;
};

int cmd_merge(const Common& common, const MergeArgs& a) {
  mol::RunConfig cfg = load_config(common);
  require_file(a.checkpoint, "--checkpoint");
  const std::string task_path = a.corpus.empty() ? cfg.merge.task_corpus.value_or("") : a.corpus;
  require_file(task_path, "merge.task_corpus");
  const std::string vocab_path = a.vocab.empty() ? cfg.data.vocab.value_or("") : a.vocab;
  require_file(vocab_path, "data.vocab");
  if (!a.strategy.empty()) cfg.merge.merge.strategy = mol::parse_merge_strategy(a.strategy);

  mol::RecursiveEncoder model = mol::from_checkpoint(mol::read_checkpoint(a.checkpoint));
  if (model.mol_groups().empty()) throw mol::MergeError("no MoL layers in " + a.checkpoint);
  const mol::Vocab vocab = mol::Vocab::load(vocab_path);
  check_vocab(vocab, model.config());
  const mol::Corpus task = load_corpus(task_path, vocab, cfg.data.seq_len);
  const std::string eval_path = !a.eval_corpus.empty() ? a.eval_corpus : cfg.merge.eval_corpus.value_or(task_path);
  const mol::Corpus eval = load_corpus(eval_path, vocab, cfg.data.seq_len);

  const std::uint64_t seed = cfg.seed.value_or(0);
  const double unmerged = mol::evaluate(model, eval, cfg.training.masking, seed).loss;
  const mol::MergeResult result = mol::finetune_merged(model, task, cfg.merge.merge);
  const double merged = mol::evaluate(model, eval, cfg.training.masking, seed).loss;

  const fs::path out = a.out.empty() ? fs::path(cfg.output_dir) / "merged.ckpt" : fs::path(a.out);
  mol::write_checkpoint(out, mol::export_merged(model));

  json report = mol::merge_report_json(result);
  report["eval_loss_unmerged"] = unmerged;
  report["eval_loss_merged"] = merged;
  report["eval_loss_difference"] = merged - unmerged;
  report["checkpoint"] = out.string();
  write_json(out.parent_path() / "merge_report.json", report);
  if (common.json_out) {
    std::cout << report.dump() << '\n';
  } else {
    std::cout << "strategy: " << mol::to_string(result.strategy) << "\nrouter frozen: " << std::boolalpha
              << result.router_frozen << "\neval loss unmerged: " << unmerged << "\neval loss merged: " << merged
              << "\ncheckpoint: " << out.string() << '\n';
    for (const auto& l : result.layers()) {
      std::cout << "group " << l.group << " w:";
      for (double w : l.w) std::cout << ' ' << w;
      std::cout << '\n';
    }
  }
  return 0;
}

mol::ModelConfig model_from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw mol::ConfigError("--config: cannot open " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw mol::ConfigError("--config: " + path + " is not valid JSON: " + e.what());
  }
  if (j.is_object() && j.contains("model")) return mol::run_config_from_json(j).model;
  return mol::model_config_from_json(j, "model");
}

int cmd_count_params(const Common& common, const std::string& variant) {
  if (common.config.empty() == variant.empty()) throw mol::ConfigError("count-params: give exactly one of --config or --variant");
  const mol::ModelConfig m = variant.empty() ? model_from_file(common.config) : mol::variant_config(variant);
  const mol::ParamReport r = mol::count_params(m);
  if (common.json_out) {
    std::cout << json{{"model", mol::to_json(m)},
                      {"unique_params", r.unique_params},
                      {"full_equivalent_params", r.full_equivalent_params},
                      {"ratio", r.ratio},
                      {"block_unique", r.block_unique},
                      {"block_full", r.block_full},
                      {"block_ratio", r.block_ratio},
                      {"approx_unique", r.approx_unique},
                      {"approx_full", r.approx_full},
                      {"breakdown", r.breakdown}}
                     .dump()
              << '\n';
    return 0;
  }
  std::cout << "layers " << m.n_layers << ", groups " << m.n_groups << ", hidden " << m.d_model << ", ffn " << m.d_ff
            << ", heads " << m.n_heads << ", vocab " << m.vocab_size << '\n';
  std::cout << "mol groups:";
  for (auto g : m.mol_groups) std::cout << ' ' << g;
  std::cout << " (" << m.n_experts << " experts, top-" << m.top_k << ", rank " << m.lora_rank << ")\n";
  std::cout << std::left << std::setw(28) << "unique params" << r.unique_params << '\n'
            << std::setw(28) << "full-equivalent params" << r.full_equivalent_params << '\n'
            << std::setw(28) << "ratio" << r.ratio << '\n'
            << std::setw(28) << "block params (unique)" << r.block_unique << '\n'
            << std::setw(28) << "block params (full)" << r.block_full << '\n'
            << std::setw(28) << "block ratio" << r.block_ratio << '\n'
            << std::setw(28) << "approx 12Kd^2" << r.approx_unique << '\n'
            << std::setw(28) << "approx 12Nd^2" << r.approx_full << '\n';
  for (const auto& [k, v] : r.breakdown) std::cout << "  " << std::setw(26) << k << v << '\n';
  return 0;
}

struct GradArgs {
  double tolerance = 1e-4;
  std::string inject_fault;
  bool no_distill = false;
};

int cmd_grad_check(const Common& common, const GradArgs& a) {
  const mol::RunConfig cfg = load_config(common);
  mol::GradCheckConfig gc;
  gc.tolerance = a.tolerance;
  gc.seed = cfg.seed.value_or(0);
  gc.distill = !a.no_distill;
  gc.distill_cfg = cfg.training.objective.distill;
  gc.aux_loss_coef = cfg.training.objective.aux_loss_coef;
  if (!a.inject_fault.empty()) gc.inject_fault = a.inject_fault;
  const mol::GradCheckReport r = mol::grad_check(cfg.model, gc);
  if (common.json_out) {
    std::cout << mol::to_json(r).dump() << '\n';
  } else {
    for (const auto& t : r.tensors) {
      std::cout << (t.pass ? "ok   " : "FAIL ") << std::left << std::setw(32) << t.name << " rel " << std::scientific
                << std::setprecision(3) << t.rel_error << std::defaultfloat << " (" << t.numel << ")\n";
    }
    const auto* w = r.worst();
    std::cout << (r.pass ? "PASS" : "FAIL") << " tolerance " << r.tolerance;
    if (w) std::cout << ", worst " << w->name << " " << w->rel_error;
    std::cout << '\n';
  }
  return r.pass ? 0 : 1;
}

struct GenArgs {
  std::string kind = "two_sublanguage", out;
  mol::Index n = 1000;
  mol::SyntheticSpec spec;
};

int cmd_gen_data(const Common& common, GenArgs a) {
  a.spec.kind = mol::parse_synthetic_kind(a.kind);
  a.spec.seed = common.seed.value_or(a.spec.seed);
  const mol::SyntheticCorpus c = mol::gen_synthetic(a.spec, a.n);
  mol::write_lines(a.out, c.docs);
  std::vector<std::string> src;
  for (int s : c.sources) src.push_back(s == 0 ? "A" : "B");
  mol::write_lines(a.out + ".sources", src);
  if (common.json_out) {
    std::cout << json{{"docs", c.docs.size()}, {"out", a.out}, {"sources", a.out + ".sources"}}.dump() << '\n';
  } else {
    std::cout << "wrote " << c.docs.size() << " documents to " << a.out << '\n';
  }
  return 0;
}

int cmd_build_vocab(const Common& common, const std::string& corpus, mol::Index max_size, const std::string& out) {
  require_file(corpus, "--corpus");
  const mol::Vocab v = mol::build_vocab(corpus, max_size);
  v.save(out);
  if (common.json_out) {
    std::cout << json{{"size", v.size()}, {"out", out}}.dump() << '\n';
  } else {
    std::cout << "vocab of " << v.size() << " tokens written to " << out << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recursive parameter-shared encoders with mixtures of LoRA experts"};
  app.require_subcommand(1);

  Common pretrain_c, finetune_c, eval_c, merge_c, count_c, grad_c, gen_c, vocab_c;
  auto* pretrain = app.add_subcommand("pretrain", "MLM pretraining (optionally two-phase, with distillation)");
  add_common(pretrain, pretrain_c, true);
  auto* finetune = app.add_subcommand("finetune", "continue MLM training from data.init_checkpoint");
  add_common(finetune, finetune_c, true);

  auto* eval = app.add_subcommand("eval", "held-out MLM loss, perplexity and expert usage");
  add_common(eval, eval_c, false);
  EvalArgs eval_a;
  eval->add_option("--checkpoint", eval_a.checkpoint)->required();
  eval->add_option("--corpus", eval_a.corpus)->required();
  eval->add_option("--vocab", eval_a.vocab);
  eval->add_option("--seq-len", eval_a.seq_len);

  auto* merge = app.add_subcommand("merge", "fine-tune with merged experts and export a routing-free checkpoint");
  add_common(merge, merge_c, false);
  MergeArgs merge_a;
  merge->add_option("--checkpoint", merge_a.checkpoint)->required();
  merge->add_option("--corpus", merge_a.corpus, "task corpus");
  merge->add_option("--eval-corpus", merge_a.eval_corpus);
  merge->add_option("--vocab", merge_a.vocab);
  merge->add_option("--strategy", merge_a.strategy)->check(CLI::IsMember({"uniform", "ema"}));
  merge->add_option("--out", merge_a.out);

  auto* count = app.add_subcommand("count-params", "exact and approximate parameter counts");
  add_common(count, count_c, false);
  std::string variant;
  count->add_option("--variant", variant)->check(CLI::IsMember({"tiny", "medium", "base", "large"}));

  auto* grad = app.add_subcommand("grad-check", "finite-difference check of every parameter gradient");
  add_common(grad, grad_c, true);
  GradArgs grad_a;
  grad->add_option("--tolerance", grad_a.tolerance);
  grad->add_option("--inject-fault", grad_a.inject_fault, "perturb this tensor's analytic gradient");
  grad->add_flag("--no-distill", grad_a.no_distill);

  auto* gen = app.add_subcommand("gen-data", "synthetic corpora");
  add_common(gen, gen_c, false);
  GenArgs gen_a;
  gen->add_option("--kind", gen_a.kind)->check(CLI::IsMember({"two_sublanguage", "copy_pattern"}));
  gen->add_option("--n", gen_a.n)->check(CLI::NonNegativeNumber);
  gen->add_option("--out", gen_a.out)->required();
  gen->add_option("--tokens-per-source", gen_a.spec.tokens_per_source);
  gen->add_option("--successors", gen_a.spec.successors);
  gen->add_option("--seq-len", gen_a.spec.seq_len);
  gen->add_option("--mixture", gen_a.spec.mixture);
  gen->add_option("--pattern-len", gen_a.spec.pattern_len);

  auto* vocab = app.add_subcommand("build-vocab", "frequency-ranked whitespace vocabulary");
  add_common(vocab, vocab_c, false);
  std::string vocab_corpus, vocab_out;
  mol::Index vocab_max = 512;
  vocab->add_option("--corpus", vocab_corpus)->required();
  vocab->add_option("--max-size", vocab_max);
  vocab->add_option("--out", vocab_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*pretrain) return cmd_train(pretrain_c, false);
    if (*finetune) return cmd_train(finetune_c, true);
    if (*eval) return cmd_eval(eval_c, eval_a);
    if (*merge) return cmd_merge(merge_c, merge_a);
    if (*count) return cmd_count_params(count_c, variant);
    if (*grad) return cmd_grad_check(grad_c, grad_a);
    if (*gen) return cmd_gen_data(gen_c, gen_a);
    if (*vocab) return cmd_build_vocab(vocab_c, vocab_corpus, vocab_max, vocab_out);
  } catch (const mol::ConfigError& e) {
    log(Level::error, std::string("config error: ") + e.what());
    return 2;
  } catch (const mol::InputError& e) {
    log(Level::error, std::string("input error: ") + e.what());
    return 2;
  } catch (const mol::NumericError& e) {
    log(Level::error, std::string("numeric error: ") + e.what());
    return 3;
  } catch (const std::exception& e) {
    log(Level::error, e.what());
    return 3;
  }
  return 0;
}
