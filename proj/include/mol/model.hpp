#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "mol/conditional.hpp"

namespace mol {

enum class ConditionalKind { mol, moa };
enum class TeacherSelector { first, middle, average };

struct ModelConfig {
  Index n_layers = 4;   // N
  Index n_groups = 2;   // K
  Index d_model = 64;
  Index d_ff = 128;
  Index n_heads = 4;
  Index vocab_size = 512;
  Index max_seq = 64;
  std::vector<Index> mol_groups;  // 1-based group indices
  Index n_experts = 4;
  Index top_k = 2;
  Index lora_rank = 8;
  double lora_alpha = 16.0;
  bool geglu = true;
  ConditionalKind conditional = ConditionalKind::mol;
  // Set on exported checkpoints: MoL groups carry one static adapter of
  // rank n_experts * lora_rank and no router.
  bool merged = false;
  std::optional<Index> expert_dim;  // informational only
  double rope_base = 10000.0;
  double norm_eps = 1e-5;
  double init_std = 0.02;

  Index group_size() const { return n_groups > 0 ? n_layers / n_groups : 0; }
  Index head_dim() const { return d_model / n_heads; }
  bool has_conditional(Index group) const;  // 1-based
  Index moa_bottleneck() const { return moa_bottleneck_for_rank(d_model, d_ff, lora_rank); }
  RopeConfig rope() const { return RopeConfig(rope_base, head_dim(), max_seq); }

  void validate() const;
};

struct ParamReport {
  std::int64_t unique_params = 0;
  std::int64_t full_equivalent_params = 0;
  double ratio = 0.0;
  std::int64_t block_unique = 0;  // transformer blocks only
  std::int64_t block_full = 0;
  double block_ratio = 0.0;
  std::int64_t approx_unique = 0;  // 12 K d^2
  std::int64_t approx_full = 0;    // 12 N d^2
  std::map<std::string, std::int64_t> breakdown;
};

ParamReport count_params(const ModelConfig& cfg);

struct NamedParameter {
  std::string name;
  Vard var;
  bool trainable = true;
  bool decay = true;  // matrices decay; norms do not
};

// Static LoRA on both FFN projections, produced by merging and export.
struct StaticLora {
  LoraDelta<double> delta;
};

using GroupExtension = std::variant<std::monostate, MolLayer<double>, MoaLayer<double>, StaticLora>;

struct TokenBatch {
  std::vector<Index> ids;  // n_seq * seq_len, row-major
  Index seq_len = 0;

  Index n_seq() const { return seq_len ? static_cast<Index>(ids.size()) / seq_len : 0; }
};

struct LayerRouting {
  Index group = 0;  // 1-based
  Index layer = 0;  // 1-based depth position
  RoutingTrace<double> trace;
};

struct ForwardTrace {
  std::vector<LayerRouting> routing;
  // In merged mode, still evaluate routers (for EMA statistics).
  bool merged_router_stats = false;
};

inline constexpr Index kPadId = 0;

// Recursive parameter-shared encoder: layer i (1-based) applies group
// ceil(i / G). A group's conditional layer (MoL/MoA/static LoRA) replaces the
// shared FFN only in that group's last application.
class RecursiveEncoder {
 public:
  RecursiveEncoder(const ModelConfig& cfg, std::uint64_t seed);

  RecursiveEncoder(const RecursiveEncoder&) = delete;
  RecursiveEncoder& operator=(const RecursiveEncoder&) = delete;
  RecursiveEncoder(RecursiveEncoder&&) = default;
  RecursiveEncoder& operator=(RecursiveEncoder&&) = default;

  // Deep copy; the clone shares no parameter storage with this model.
  RecursiveEncoder clone() const;

  const ModelConfig& config() const { return cfg_; }

  // Group (1-based) used by layer (1-based).
  Index group_of_layer(Index layer) const { return (layer - 1) / cfg_.group_size() + 1; }

  // Final-LN hidden states [n_seq * seq_len, d].
  Vard encode(const TokenBatch& batch, ForwardTrace* trace = nullptr) const;
  // Hidden state after `layers` applications, before the final LN.
  Vard encode_prefix(const TokenBatch& batch, Index layers, ForwardTrace* trace = nullptr) const;
  // Tied-embedding projection of selected hidden rows to vocabulary logits.
  Vard logits(const Vard& hidden) const;
  Vard logits_at(const Vard& hidden, const std::vector<Index>& rows) const;

  // Single sequence -> [seq, vocab] logits.
  Tensord forward_mlm(const std::vector<Index>& token_ids) const;

  std::vector<NamedParameter> named_parameters() const;
  std::int64_t parameter_count() const;

  SharedBlockParams<double>& group(Index g) { return groups_.at(static_cast<std::size_t>(g - 1)); }
  const SharedBlockParams<double>& group(Index g) const { return groups_.at(static_cast<std::size_t>(g - 1)); }
  GroupExtension& extension(Index g) { return ext_.at(static_cast<std::size_t>(g - 1)); }
  const GroupExtension& extension(Index g) const { return ext_.at(static_cast<std::size_t>(g - 1)); }
  Vard& embedding() { return embedding_; }
  const Vard& embedding() const { return embedding_; }
  LayerNormParams<double>& final_norm() { return final_norm_; }
  const LayerNormParams<double>& final_norm() const { return final_norm_; }

  // Merged-mode weights for a MoL group. While set, that group's MoL layer
  // runs as one static adapter sum_j w_j delta_j with no routing.
  void set_merge_weights(Index g, Tensord w);
  const std::optional<Tensord>& merge_weights(Index g) const {
    return merge_w_.at(static_cast<std::size_t>(g - 1));
  }
  void clear_merge_weights();
  // Groups carrying a MoL layer, ascending.
  std::vector<Index> mol_groups() const;

  // Replaces every parameter's value by name (used by checkpoint loading).
  void assign(const std::map<std::string, Tensord>& values);
  // Resets LoRA B factors to zero and router weights to zero.
  void reset_conditional();

  void set_router_frozen(bool frozen);

 private:
  Vard ffn_sublayer(Index g, bool last_in_group, Index layer, const Vard& x, ForwardTrace* trace) const;

  ModelConfig cfg_;
  Vard embedding_;  // [V, d], tied with the MLM head
  std::vector<SharedBlockParams<double>> groups_;
  std::vector<GroupExtension> ext_;
  std::vector<std::optional<Tensord>> merge_w_;
  LayerNormParams<double> final_norm_;
};

// Fully-parameterised teacher geometry (K = N, no conditional layers).
ModelConfig teacher_config(const ModelConfig& student);

// Copies teacher weights into the shared blocks: group g takes teacher layer
// (g-1)G+1 (first), the middle layer of the group, or the mean of its G
// layers. Embedding and final norm are copied; LoRA deltas become zero and
// routers uniform.
void init_from_teacher(RecursiveEncoder& student, const RecursiveEncoder& teacher,
                       TeacherSelector selector = TeacherSelector::first);

}  // namespace mol
