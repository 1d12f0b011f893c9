#pragma once

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>

#include "embedkit/dataset.hpp"
#include "embedkit/model.hpp"
#include "embedkit/train.hpp"

namespace embedkit {

// Every config object is read strictly: unknown keys are an InvalidConfig
// error, missing keys keep their defaults. Top-level files carry "version": 1.

void to_json(nlohmann::json& j, const ViTConfig& c);
void from_json(const nlohmann::json& j, ViTConfig& c);
void to_json(nlohmann::json& j, const MarginSchedule& c);
void from_json(const nlohmann::json& j, MarginSchedule& c);
void to_json(nlohmann::json& j, const HeadConfig& c);
void from_json(const nlohmann::json& j, HeadConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const StageConfig& c);
void from_json(const nlohmann::json& j, StageConfig& c);
void to_json(nlohmann::json& j, const RecipeConfig& c);
void from_json(const nlohmann::json& j, RecipeConfig& c);
void to_json(nlohmann::json& j, const SyntheticDatasetSpec& c);
void from_json(const nlohmann::json& j, SyntheticDatasetSpec& c);

/// What `train` consumes. The plan is either an explicit "stages" list or a
/// "recipe" object expanded by a template ("head-locked", "lp-ft", "split-lr").
struct TrainConfig {
  ModelConfig model;
  StagePlan plan;
  std::optional<std::string> init_checkpoint;  // start from this model
  std::optional<std::string> head_from;        // copy head parameters from this checkpoint
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

StagePlan expand_recipe(const std::string& template_name, const RecipeConfig& recipe);

TrainConfig load_train_config(const std::filesystem::path& path);
SyntheticDatasetSpec load_dataset_spec(const std::filesystem::path& path);

/// Parses JSON text, mapping parse and type errors to InvalidConfig.
nlohmann::json parse_json(const std::string& text, const std::string& origin);

}  // namespace embedkit
