#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "mol/merging.hpp"
#include "mol/model.hpp"
#include "mol/training.hpp"

namespace mol {

struct DataConfig {
  std::optional<std::string> vocab;
  std::optional<std::string> phase1_corpus;
  std::optional<std::string> phase2_corpus;
  std::optional<std::string> init_checkpoint;  // finetune: start from here
  Index seq_len = 32;
};

struct TeacherConfig {
  std::optional<std::string> checkpoint;
  bool init_from_teacher = false;
  TeacherSelector selector = TeacherSelector::first;
};

struct MergeRunConfig {
  MergeConfig merge;
  std::optional<std::string> task_corpus;
  std::optional<std::string> eval_corpus;
};

// Everything a command needs; resolved copies are written next to outputs.
struct RunConfig {
  std::optional<std::uint64_t> seed;
  std::string output_dir = "run";
  ModelConfig model;
  DataConfig data;
  TrainConfig training;
  TeacherConfig teacher;
  MergeRunConfig merge;
  std::optional<std::string> resume_from;
};

nlohmann::json to_json(const ModelConfig& cfg);
// Strict: unknown keys and wrongly-typed values raise ConfigError naming the
// field path.
ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& path = "model");

nlohmann::json to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

nlohmann::json to_json(const AdamWConfig& cfg);

std::string to_string(ConditionalKind k);
std::string to_string(TeacherSelector s);

// Published variant geometries (Tiny, Medium, Base, Large).
ModelConfig variant_config(const std::string& name);

}  // namespace mol
