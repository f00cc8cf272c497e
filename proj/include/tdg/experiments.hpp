#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <span>
#include <string>

#include "tdg/checkpoint.hpp"
#include "tdg/metrics.hpp"
#include "tdg/scenes.hpp"
#include "tdg/train_config.hpp"

namespace tdg::experiments {

/// Rows of the loss ablation: L1, L1 + perceptual, + guidance, + conflict detection.
enum class AblationRow { kL1, kL1Perceptual, kTdg, kTdgCd };

const char* row_name(AblationRow row);

// Base config with the row's loss toggles and the given seed. kTdgCd trains like kTdg.
train::TrainConfig row_config(const train::TrainConfig& base, AblationRow row, std::uint64_t seed);

// Stable 16-hex-digit digest of the config (checkpoint_dir excluded).
std::string config_key(const train::TrainConfig& cfg);

// Trained checkpoint for `cfg`, kept under cache_dir/<key>/. A finished run is
// reused; an interrupted one resumes from its last checkpoint.
train::Checkpoint trained(const train::TrainConfig& cfg, std::span<const scenes::SceneSample> data,
                          const std::filesystem::path& cache_dir, std::ostream* progress = nullptr);

// Per-image feature variance of backbone features, averaged over images.
metrics::VarianceReport mean_feature_variance(const train::Checkpoint& ckpt,
                                              std::span<const scenes::SceneSample> data);

}  // namespace tdg::experiments
