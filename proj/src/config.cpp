#include "mol/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace mol {

using nlohmann::json;

namespace {

// Reads fields from one JSON object and rejects keys nobody asked for.
class FieldReader {
 public:
  FieldReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!has(key)) return;
    out = convert<T>(key, j_.at(key));
  }

  template <typename T>
  void get(const std::string& key, std::optional<T>& out) {
    if (!has(key)) return;
    out = convert<T>(key, j_.at(key));
  }

  template <typename T>
  T require(const std::string& key) {
    if (!has(key)) throw ConfigError(field(key) + ": required field is missing");
    return convert<T>(key, j_.at(key));
  }

  const json& sub(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(field(key) + ": unknown key");
    }
  }

 private:
  template <typename T>
  T convert(const std::string& key, const json& v) const {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(field(key) + ": expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(field(key) + ": expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
          throw ConfigError(field(key) + ": expected a non-negative integer");
        }
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(field(key) + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(field(key) + ": expected a string");
    }
    try {
      return v.get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(field(key) + ": " + e.what());
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename Enum>
Enum parse_enum(const std::string& field, const std::string& value,
                std::initializer_list<std::pair<const char*, Enum>> options) {
  std::string allowed;
  for (const auto& [name, e] : options) {
    if (value == name) return e;
    allowed += allowed.empty() ? name : std::string("|") + name;
  }
  throw ConfigError(field + ": unknown value '" + value + "' (expected " + allowed + ")");
}

ConditionalKind parse_conditional(const std::string& field, const std::string& v) {
  return parse_enum<ConditionalKind>(field, v, {{"mol", ConditionalKind::mol}, {"moa", ConditionalKind::moa}});
}

TeacherSelector parse_selector(const std::string& field, const std::string& v) {
  return parse_enum<TeacherSelector>(
      field, v,
      {{"first", TeacherSelector::first}, {"middle", TeacherSelector::middle}, {"average", TeacherSelector::average}});
}

RouterPolicy parse_router_policy(const std::string& field, const std::string& v) {
  return parse_enum<RouterPolicy>(
      field, v,
      {{"auto", RouterPolicy::automatic}, {"frozen", RouterPolicy::frozen}, {"trainable", RouterPolicy::trainable}});
}

std::string to_string(RouterPolicy p) {
  switch (p) {
    case RouterPolicy::automatic: return "auto";
    case RouterPolicy::frozen: return "frozen";
    case RouterPolicy::trainable: return "trainable";
  }
  return "auto";
}

json optional_json(const std::optional<std::string>& v) { return v ? json(*v) : json(nullptr); }

MaskingConfig masking_from_json(const json& j, const std::string& path) {
  MaskingConfig m;
  FieldReader r(j, path);
  r.get("mask_rate", m.mask_rate);
  r.get("mask_prob", m.mask_prob);
  r.get("random_prob", m.random_prob);
  r.get("keep_prob", m.keep_prob);
  r.get("mask_token_id", m.mask_token_id);
  r.finish();
  return m;
}

json to_json(const MaskingConfig& m) {
  return {{"mask_rate", m.mask_rate},
          {"mask_prob", m.mask_prob},
          {"random_prob", m.random_prob},
          {"keep_prob", m.keep_prob},
          {"mask_token_id", m.mask_token_id}};
}

}  // namespace

std::string to_string(ConditionalKind k) { return k == ConditionalKind::mol ? "mol" : "moa"; }

std::string to_string(TeacherSelector s) {
  switch (s) {
    case TeacherSelector::first: return "first";
    case TeacherSelector::middle: return "middle";
    case TeacherSelector::average: return "average";
  }
  return "first";
}

json to_json(const ModelConfig& c) {
  json j = {{"n_layers", c.n_layers},
            {"n_groups", c.n_groups},
            {"d_model", c.d_model},
            {"d_ff", c.d_ff},
            {"n_heads", c.n_heads},
            {"vocab_size", c.vocab_size},
            {"max_seq", c.max_seq},
            {"mol_groups", c.mol_groups},
            {"n_experts", c.n_experts},
            {"top_k", c.top_k},
            {"lora_rank", c.lora_rank},
            {"lora_alpha", c.lora_alpha},
            {"geglu", c.geglu},
            {"conditional", to_string(c.conditional)},
            {"merged", c.merged},
            {"expert_dim", c.expert_dim ? json(*c.expert_dim) : json(nullptr)},
            {"rope_base", c.rope_base},
            {"norm_eps", c.norm_eps},
            {"init_std", c.init_std}};
  return j;
}

ModelConfig model_config_from_json(const json& j, const std::string& path) {
  ModelConfig c;
  FieldReader r(j, path);
  r.get("n_layers", c.n_layers);
  r.get("n_groups", c.n_groups);
  r.get("d_model", c.d_model);
  r.get("d_ff", c.d_ff);
  r.get("n_heads", c.n_heads);
  r.get("vocab_size", c.vocab_size);
  r.get("max_seq", c.max_seq);
  if (r.has("mol_groups")) {
    const json& g = r.sub("mol_groups");
    if (!g.is_array()) throw ConfigError(r.field("mol_groups") + ": expected an array of integers");
    for (const auto& v : g) {
      if (!v.is_number_integer()) throw ConfigError(r.field("mol_groups") + ": expected an array of integers");
      c.mol_groups.push_back(v.get<Index>());
    }
  }
  r.get("n_experts", c.n_experts);
  r.get("top_k", c.top_k);
  r.get("lora_rank", c.lora_rank);
  r.get("lora_alpha", c.lora_alpha);
  r.get("geglu", c.geglu);
  if (r.has("conditional")) c.conditional = parse_conditional(r.field("conditional"), r.require<std::string>("conditional"));
  r.get("merged", c.merged);
  r.get("expert_dim", c.expert_dim);
  r.get("rope_base", c.rope_base);
  r.get("norm_eps", c.norm_eps);
  r.get("init_std", c.init_std);
  r.finish();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return c;
}

json to_json(const AdamWConfig& o) {
  return {{"peak_lr", o.peak_lr},       {"warmup_steps", o.warmup_steps}, {"total_steps", o.total_steps},
          {"weight_decay", o.weight_decay}, {"beta1", o.beta1},           {"beta2", o.beta2},
          {"eps", o.eps},               {"max_grad_norm", o.max_grad_norm}};
}

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed ? json(*c.seed) : json(nullptr);
  j["output_dir"] = c.output_dir;
  j["model"] = to_json(c.model);
  j["data"] = {{"vocab", optional_json(c.data.vocab)},
               {"phase1_corpus", optional_json(c.data.phase1_corpus)},
               {"phase2_corpus", optional_json(c.data.phase2_corpus)},
               {"init_checkpoint", optional_json(c.data.init_checkpoint)},
               {"seq_len", c.data.seq_len}};
  const auto& t = c.training;
  j["training"] = {{"steps", t.steps},
                   {"batch_size", t.batch_size},
                   {"phase1_steps", t.phase1_steps},
                   {"checkpoint_every", t.checkpoint_every},
                   {"peak_lr", t.optim.peak_lr},
                   {"warmup_steps", t.optim.warmup_steps},
                   {"weight_decay", t.optim.weight_decay},
                   {"beta1", t.optim.beta1},
                   {"beta2", t.optim.beta2},
                   {"eps", t.optim.eps},
                   {"max_grad_norm", t.optim.max_grad_norm},
                   {"aux_loss_coef", t.objective.aux_loss_coef},
                   {"resume_from", optional_json(c.resume_from)}};
  j["masking"] = to_json(t.masking);
  j["distill"] = {{"enabled", t.objective.use_distill},
                  {"temperature", t.objective.distill.temperature},
                  {"lambda", t.objective.distill.lambda},
                  {"teacher_checkpoint", optional_json(c.teacher.checkpoint)},
                  {"init_from_teacher", c.teacher.init_from_teacher},
                  {"selector", to_string(c.teacher.selector)}};
  const auto& m = c.merge.merge;
  j["merge"] = {{"strategy", to_string(m.strategy)},
                {"ema_decay", m.ema_decay},
                {"steps", m.steps},
                {"batch_size", m.batch_size},
                {"peak_lr", m.optim.peak_lr},
                {"warmup_steps", m.optim.warmup_steps},
                {"router", to_string(m.router)},
                {"freeze_threshold", m.freeze_threshold},
                {"aux_loss_coef", m.aux_loss_coef},
                {"task_corpus", optional_json(c.merge.task_corpus)},
                {"eval_corpus", optional_json(c.merge.eval_corpus)}};
  return j;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  FieldReader r(j, "");
  if (r.has("seed")) c.seed = r.require<std::uint64_t>("seed");
  r.get("output_dir", c.output_dir);
  if (r.has("model")) c.model = model_config_from_json(r.sub("model"), "model");

  if (r.has("data")) {
    FieldReader d(r.sub("data"), "data");
    d.get("vocab", c.data.vocab);
    d.get("phase1_corpus", c.data.phase1_corpus);
    d.get("phase2_corpus", c.data.phase2_corpus);
    d.get("init_checkpoint", c.data.init_checkpoint);
    d.get("seq_len", c.data.seq_len);
    d.finish();
    if (c.data.seq_len < 1) throw ConfigError("data.seq_len: must be >= 1");
    if (c.data.seq_len > c.model.max_seq) throw ConfigError("data.seq_len: exceeds model.max_seq");
  }

  auto& t = c.training;
  if (r.has("training")) {
    FieldReader tr(r.sub("training"), "training");
    tr.get("steps", t.steps);
    tr.get("batch_size", t.batch_size);
    tr.get("phase1_steps", t.phase1_steps);
    tr.get("checkpoint_every", t.checkpoint_every);
    tr.get("peak_lr", t.optim.peak_lr);
    tr.get("warmup_steps", t.optim.warmup_steps);
    tr.get("weight_decay", t.optim.weight_decay);
    tr.get("beta1", t.optim.beta1);
    tr.get("beta2", t.optim.beta2);
    tr.get("eps", t.optim.eps);
    tr.get("max_grad_norm", t.optim.max_grad_norm);
    tr.get("aux_loss_coef", t.objective.aux_loss_coef);
    tr.get("resume_from", c.resume_from);
    tr.finish();
  }
  if (t.steps < 1) throw ConfigError("training.steps: must be >= 1");
  if (t.batch_size < 1) throw ConfigError("training.batch_size: must be >= 1");
  if (t.phase1_steps < 0) throw ConfigError("training.phase1_steps: must be >= 0");
  if (t.checkpoint_every < 0) throw ConfigError("training.checkpoint_every: must be >= 0");
  if (t.objective.aux_loss_coef < 0) throw ConfigError("training.aux_loss_coef: must be >= 0");
  t.optim.total_steps = t.steps;
  try {
    t.optim.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("training: ") + e.what());
  }

  if (r.has("masking")) t.masking = masking_from_json(r.sub("masking"), "masking");
  t.masking.validate(c.model.vocab_size);

  if (r.has("distill")) {
    FieldReader d(r.sub("distill"), "distill");
    d.get("enabled", t.objective.use_distill);
    d.get("temperature", t.objective.distill.temperature);
    d.get("lambda", t.objective.distill.lambda);
    d.get("teacher_checkpoint", c.teacher.checkpoint);
    d.get("init_from_teacher", c.teacher.init_from_teacher);
    if (d.has("selector")) c.teacher.selector = parse_selector("distill.selector", d.require<std::string>("selector"));
    d.finish();
    try {
      t.objective.distill.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("distill: ") + e.what());
    }
    if ((t.objective.use_distill || c.teacher.init_from_teacher) && !c.teacher.checkpoint) {
      throw ConfigError("distill.teacher_checkpoint: required when distillation or teacher init is enabled");
    }
  }

  auto& m = c.merge.merge;
  if (r.has("merge")) {
    FieldReader mr(r.sub("merge"), "merge");
    if (mr.has("strategy")) {
      const std::string s = mr.require<std::string>("strategy");
      try {
        m.strategy = parse_merge_strategy(s);
      } catch (const ConfigError&) {
        throw ConfigError("merge.strategy: unknown value '" + s + "' (expected uniform|ema)");
      }
    }
    mr.get("ema_decay", m.ema_decay);
    mr.get("steps", m.steps);
    mr.get("batch_size", m.batch_size);
    mr.get("peak_lr", m.optim.peak_lr);
    mr.get("warmup_steps", m.optim.warmup_steps);
    if (mr.has("router")) m.router = parse_router_policy("merge.router", mr.require<std::string>("router"));
    mr.get("freeze_threshold", m.freeze_threshold);
    mr.get("aux_loss_coef", m.aux_loss_coef);
    mr.get("task_corpus", c.merge.task_corpus);
    mr.get("eval_corpus", c.merge.eval_corpus);
    mr.finish();
  }
  m.masking = t.masking;
  m.optim.total_steps = m.steps;
  try {
    m.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("merge: ") + e.what());
  }
  r.finish();
  if (c.seed) {
    t.seed = *c.seed;
    m.seed = *c.seed;
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

ModelConfig variant_config(const std::string& name) {
  ModelConfig c;
  c.vocab_size = 50368;
  c.max_seq = 1024;
  c.geglu = true;
  c.lora_rank = 8;
  c.lora_alpha = 16.0;
  c.n_experts = 8;
  c.top_k = 2;
  c.d_model = 1024;
  c.n_heads = 16;
  c.d_ff = 2624;
  c.expert_dim = 4096;
  if (name == "tiny") {
    c.n_layers = 14;
    c.n_groups = 7;
    c.mol_groups = {6, 7};
    c.d_model = 768;
    c.n_heads = 12;
    c.d_ff = 1152;
    c.expert_dim = 2624;
    c.n_experts = 4;
    c.top_k = 1;
  } else if (name == "medium") {
    c.n_layers = 12;
    c.n_groups = 3;
    c.mol_groups = {3};
  } else if (name == "base") {
    c.n_layers = 16;
    c.n_groups = 4;
    c.mol_groups = {3, 4};
  } else if (name == "large") {
    c.n_layers = 24;
    c.n_groups = 6;
    c.mol_groups = {3, 4, 5, 6};
  } else {
    throw ConfigError("unknown variant '" + name + "' (expected tiny|medium|base|large)");
  }
  c.validate();
  return c;
}

}  // namespace mol
