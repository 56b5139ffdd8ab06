#pragma once

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mol/training.hpp"

namespace mol {

inline constexpr std::int64_t kGradCheckMaxParams = 100000;

struct GradCheckConfig {
  double h = 1e-5;
  double tolerance = 1e-4;
  Index batch_size = 4;
  Index seq_len = 8;
  std::uint64_t seed = 0;
  double param_std = 0.1;   // every tensor is re-drawn so no factor sits at zero
  double router_std = 1.0;  // wide router logits keep top-k away from ties
  bool distill = true;
  DistillConfig distill_cfg;
  double aux_loss_coef = 0.01;
  MaskingConfig masking{0.5, 0.8, 0.1, 0.1, 1};
  // Negative control: perturbs the analytic gradient of the named tensor.
  std::optional<std::string> inject_fault;
};

struct TensorGradReport {
  std::string name;
  Index numel = 0;
  double rel_error = 0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double max_abs_error = 0;
  double numeric_norm = 0;  // zero means the tensor never influenced the loss
  bool pass = true;
};

struct GradCheckReport {
  std::vector<TensorGradReport> tensors;
  double tolerance = 0;
  bool pass = true;

  const TensorGradReport* worst() const;
};

double relative_error(const Tensord& analytic, const Tensord& numeric);

// Central differences of `loss` with respect to every element of every
// listed parameter, compared against one analytic backward pass.
GradCheckReport check_gradients(const std::function<Vard()>& loss, const std::vector<NamedParameter>& params,
                                const GradCheckConfig& cfg);

// Full objective ((1 - lambda) MLM + lambda distill + aux) on a randomised
// model of the given geometry. Refuses models above kGradCheckMaxParams.
GradCheckReport grad_check(const ModelConfig& model_cfg, const GradCheckConfig& cfg);

nlohmann::json to_json(const GradCheckReport& report);

}  // namespace mol
