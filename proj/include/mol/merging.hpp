#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mol/checkpoint.hpp"
#include "mol/training.hpp"

namespace mol {

struct MergeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ExportError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Factored merge of expert deltas: sum_j w_j (alpha/r) A_j B_j as
// A_cat = [A_1 .. A_E] and B_cat = [w_1 B_1; ..; w_E B_E] (rank E r),
// for both the W_down and W_up updates.
LoraDelta<double> merge_deltas(const std::vector<LoraExpert<double>>& experts, const Tensord& w);

struct MergeState {
  Tensord w;  // [E], on the simplex
  double ema_decay = 0.9;
  bool router_frozen = true;
  std::int64_t batches = 0;
};

// Uniform w = 1/E.
MergeState make_merge_state(Index n_experts, double ema_decay, bool router_frozen);

struct RoutingStats {
  std::vector<Tensord> per_sample;  // r_i = mean_t p_{i,t}
  Tensord batch_mean;               // r_b = mean_i r_i
  std::vector<Index> tokens;        // T_i
  Index batch_size = 0;
};

// Two-stage average: token mean within each sample, then unweighted mean
// over samples. Each entry is a [T_i, E] matrix of router probabilities.
RoutingStats batch_routing_stats(const std::vector<Tensord>& per_sample_probs);

// w <- decay * w + (1 - decay) * r_b
void ema_update(MergeState& state, const Tensord& batch_mean);

enum class MergeStrategy { uniform, ema };
enum class RouterPolicy { automatic, frozen, trainable };

struct MergeConfig {
  MergeStrategy strategy = MergeStrategy::ema;
  double ema_decay = 0.9;
  std::int64_t steps = 100;
  Index batch_size = 16;
  RouterPolicy router = RouterPolicy::automatic;
  std::int64_t freeze_threshold = 10000;  // automatic: freeze below this many samples
  std::uint64_t seed = 0;
  MaskingConfig masking;
  AdamWConfig optim;
  double aux_loss_coef = 0.01;  // only reaches a trainable router

  void validate() const;
};

struct MergeLayerReport {
  Index group = 0;
  std::vector<double> w;
};

struct MergeResult {
  MergeStrategy strategy = MergeStrategy::ema;
  std::int64_t steps = 0;
  bool router_frozen = true;
  std::map<Index, MergeState> states;  // by group
  std::vector<double> losses;
  std::vector<MergeLayerReport> layers() const;
};

std::string to_string(MergeStrategy s);
MergeStrategy parse_merge_strategy(const std::string& s);

// Switches every MoL group to merged mode and fine-tunes the expert factors
// (through the merged adapter) on the task corpus. Shared weights stay fixed.
MergeResult finetune_merged(RecursiveEncoder& model, const Corpus& task, const MergeConfig& cfg);

// Routing-free checkpoint: each MoL group becomes one static adapter of rank
// E r; router tensors are dropped.
Checkpoint export_merged(const RecursiveEncoder& model);

nlohmann::json merge_report_json(const MergeResult& result);

}  // namespace mol
