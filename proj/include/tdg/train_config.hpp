#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "tdg/model.hpp"
#include "tdg/refine.hpp"
#include "tdg/scenes.hpp"

namespace tdg::train {

/// Which loss terms enter the total; columns "L1", "LP", "TDG" of the ablation grid.
struct LossToggles {
  bool l1 = true;
  bool perceptual = true;
  bool tdg = true;

  bool operator==(const LossToggles&) const = default;
};

struct OptimizerConfig {
  double lr = 4e-4;
  std::int64_t warmup_steps = 500;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  // Linear warm-up to lr over warmup_steps, constant afterwards; step counts from 0.
  double lr_at(std::int64_t step) const;
  bool operator==(const OptimizerConfig&) const = default;
};

struct TrainConfig {
  model::ModelConfig model;
  scenes::SceneConfig scenes;
  LossToggles losses;
  double lambda_td = 0.1;
  OptimizerConfig optimizer;
  int batch_size = 16;
  std::int64_t steps = 10000;
  std::int64_t eval_interval = 1000;
  std::int64_t eval_images = 64;
  std::int64_t dataset_size = 5000;
  std::uint64_t seed = 0;
  std::string checkpoint_dir = "checkpoints";
  refine::RefineConfig refine;

  // Throws std::invalid_argument naming the first violated constraint.
  void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& cfg);
// Rejects unknown keys at every level; absent keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::filesystem::path& path);

nlohmann::ordered_json to_json(const model::ModelConfig& cfg);
model::ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace tdg::train
