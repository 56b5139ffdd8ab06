#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mol/checkpoint.hpp"
#include "mol/model.hpp"

namespace mol {

using Sequence = std::vector<Index>;
using Corpus = std::vector<Sequence>;

// ---------------------------------------------------------------------------
// Masking

struct MaskingConfig {
  double mask_rate = 0.30;
  double mask_prob = 0.8;    // replace with [MASK]
  double random_prob = 0.1;  // replace with a random non-reserved token
  double keep_prob = 0.1;    // leave unchanged
  Index mask_token_id = 1;

  void validate(Index vocab_size) const;
};

struct MaskedSequence {
  Sequence ids;                  // corrupted input
  std::vector<Index> positions;  // labelled positions, ascending
  std::vector<Index> labels;     // original ids at those positions
};

// Pad positions are never selected. Deterministic given the generator state.
MaskedSequence mask_tokens(const Sequence& ids, const MaskingConfig& cfg, Index vocab_size, std::mt19937_64& rng);
MaskedSequence mask_tokens(const Sequence& ids, const MaskingConfig& cfg, Index vocab_size, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Losses

// Mean cross-entropy over labelled rows of `logits`; nullopt when there is no
// labelled position (the caller skips the batch).
std::optional<Vard> mlm_loss(const Vard& logits, const std::vector<Index>& positions,
                             const std::vector<Index>& labels);

struct DistillConfig {
  double temperature = 2.0;
  double lambda = 0.5;  // total = (1 - lambda) mlm + lambda distill

  void validate() const;
};

Vard distill_loss(const Vard& student_logits, const Tensord& teacher_logits, const DistillConfig& cfg);

// ---------------------------------------------------------------------------
// Optimiser

struct AdamWConfig {
  double peak_lr = 5e-4;
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 1;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double max_grad_norm = 1.0;  // <= 0 disables clipping

  void validate() const;
};

struct Moments {
  Tensord m;
  Tensord v;
};

struct OptimState {
  AdamWConfig cfg;
  std::int64_t step = 0;
  std::map<std::string, Moments> moments{};
};

// Linear 0 -> peak over warmup, then linear peak -> 0 at total_steps.
double lr_at_step(std::int64_t step, const AdamWConfig& cfg);

// One bias-corrected AdamW update with decoupled weight decay on every
// trainable parameter, using lr_at_step(state.step + 1). Returns the
// pre-clipping global gradient norm.
double adamw_step(const std::vector<NamedParameter>& params, OptimState& state);

// ---------------------------------------------------------------------------
// Objective

struct MaskedBatch {
  TokenBatch tokens;             // corrupted ids
  std::vector<Index> rows;       // flattened labelled rows
  std::vector<Index> labels;
};

MaskedBatch make_masked_batch(const std::vector<Sequence>& seqs, const MaskingConfig& cfg, Index vocab_size,
                              std::mt19937_64& rng);

struct ObjectiveConfig {
  DistillConfig distill;
  bool use_distill = false;
  double aux_loss_coef = 0.01;
};

struct Objective {
  Vard total;
  double mlm = 0;
  double distill = 0;
  double aux = 0;
  std::vector<double> routing_entropy;  // per conditional layer
  ForwardTrace trace;
};

// nullopt when the batch has no labelled positions.
std::optional<Objective> compute_objective(const RecursiveEncoder& model, const MaskedBatch& batch,
                                           const ObjectiveConfig& cfg, const RecursiveEncoder* teacher);
// Same, with teacher logits at batch.rows already computed.
std::optional<Objective> compute_objective(const RecursiveEncoder& model, const MaskedBatch& batch,
                                           const ObjectiveConfig& cfg, const Tensord* teacher_logits);

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  std::int64_t steps = 500;
  Index batch_size = 16;
  std::int64_t phase1_steps = 0;  // with a phase-2 corpus: steps on phase 1 before switching
  std::int64_t checkpoint_every = 0;  // 0: final checkpoint only
  std::uint64_t seed = 0;
  MaskingConfig masking;
  ObjectiveConfig objective;
  AdamWConfig optim;
};

struct MetricsRecord {
  std::int64_t step = 0;
  double lr = 0;
  double loss = 0;
  double mlm_loss = 0;
  double distill_loss = 0;
  double aux_loss = 0;
  std::vector<double> routing_entropy;
};

std::string to_json_line(const MetricsRecord& r);

struct TrainIO {
  std::ostream* metrics = nullptr;                 // NDJSON records
  std::optional<std::filesystem::path> checkpoint_dir;
  nlohmann::json run_meta = nlohmann::json::object();  // echoed into checkpoint headers
};

struct TrainResult {
  std::vector<MetricsRecord> records;
  std::optional<std::filesystem::path> last_checkpoint;
};

// Runs steps state.step+1 .. cfg.steps. Batch sampling and masking for step s
// derive from (cfg.seed, s) only, so resuming from a checkpoint reproduces the
// uninterrupted trajectory. Throws NumericError on a non-finite loss after
// writing nothing for that step (the last good checkpoint stays on disk).
TrainResult train_loop(RecursiveEncoder& model, const Corpus& phase1, const Corpus* phase2, const TrainConfig& cfg,
                       OptimState& state, const RecursiveEncoder* teacher, const TrainIO& io);

Checkpoint training_checkpoint(const RecursiveEncoder& model, const OptimState& state, const nlohmann::json& meta);
// Restores optimiser moments and step from a training checkpoint.
void restore_optimizer(const Checkpoint& ckpt, OptimState& state);

std::mt19937_64 step_rng(std::uint64_t seed, std::int64_t step, std::uint64_t stream = 0);

// Held-out evaluation with fixed masking.
struct EvalResult {
  double loss = 0;
  double perplexity = 0;
  std::int64_t labelled = 0;
  struct LayerUsage {
    Index group = 0;
    std::vector<double> histogram;  // fraction of routing slots per expert
    double entropy = 0;
  };
  std::vector<LayerUsage> usage;
};

EvalResult evaluate(const RecursiveEncoder& model, const Corpus& corpus, const MaskingConfig& masking,
                    std::uint64_t seed, Index batch_size = 16);

}  // namespace mol
