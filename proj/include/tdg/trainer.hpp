#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "tdg/checkpoint.hpp"
#include "tdg/guidance.hpp"
#include "tdg/metrics.hpp"
#include "tdg/refine.hpp"
#include "tdg/scenes.hpp"
#include "tdg/train_config.hpp"

namespace tdg::train {

// Seed of the frozen perceptual extractor; shared by every run so loss values are comparable.
inline constexpr std::uint64_t kPerceptualSeed = 0x7065726365707431ULL;

/// Loss terms of one training step on the tape. Disabled terms are invalid Vars.
template <typename T>
struct StepGraph {
  model::BottomUp<T> bottom_up;
  ad::Var<T> l1;
  ad::Var<T> perceptual;
  ad::Var<T> tdg;
  ad::Var<T> total;
};

template <typename T>
StepGraph<T> build_step_graph(const model::Binding<T>& params, const model::Binding<T>& frozen,
                              const TrainConfig& cfg, const ad::Var<T>& images);

// Batch indices for `step`: a pure function of (seed, step), drawn without replacement
// when the dataset is large enough.
std::vector<std::int64_t> batch_indices(std::uint64_t seed, std::int64_t step, std::int64_t dataset_size, int batch);

// Stacks samples into (N,3,H,W).
Tensor<float> stack_images(std::span<const scenes::SceneSample> data, std::span<const std::int64_t> indices);

struct StepRecord {
  std::int64_t step = 0;
  guidance::LossReport losses;
  double grad_norm = 0.0;
};

nlohmann::ordered_json to_json(const StepRecord& r);

class NonFiniteLoss : public std::runtime_error {
 public:
  explicit NonFiniteLoss(std::int64_t step)
      : std::runtime_error("non-finite loss at step " + std::to_string(step)), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

/// Owns model and optimizer state; every step is deterministic given the state.
class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg);
  explicit Trainer(Checkpoint resume);

  // One optimization step on a batch drawn from `data`; returns the pre-update losses.
  StepRecord step(std::span<const scenes::SceneSample> data);

  std::int64_t current_step() const { return state_.step; }
  const TrainConfig& config() const { return state_.config; }
  const Checkpoint& state() const { return state_; }
  model::SlotModel slot_model() const { return state_.slot_model(); }

  // Stores th calibrated on the first calibration_size samples of `data`.
  double calibrate(std::span<const scenes::SceneSample> data);

 private:
  Checkpoint state_;
};

struct TrainOptions {
  std::ostream* log = nullptr;  // line-delimited step and evaluation records
  bool write_checkpoints = true;
  std::vector<scenes::SceneSample> eval_set;  // evaluated every eval_interval steps when non-empty
  std::function<void(const StepRecord&)> on_step;
};

// Trains until cfg.steps, then calibrates th. Checkpoints go to cfg.checkpoint_dir as
// last.tdgc at every eval interval and at the end; a non-finite loss throws
// NonFiniteLoss and leaves the last written checkpoint in place.
Checkpoint train(Trainer& trainer, std::span<const scenes::SceneSample> data, const TrainOptions& options = {});
Checkpoint train(const TrainConfig& cfg, std::span<const scenes::SceneSample> data, const TrainOptions& options = {});

// Threads used for per-image evaluation: TDG_THREADS if set, else the hardware count.
int evaluation_threads();

struct Evaluation {
  metrics::MetricsReport report;
  std::vector<refine::RefineTrace> traces;  // one per image when CD ran
  std::optional<double> threshold;
};

// Calibrated th: the checkpoint's value if present, else computed from the first
// calibration_size images of `data`.
double resolve_threshold(const Checkpoint& ckpt, std::span<const scenes::SceneSample> data);

Evaluation evaluate(const Checkpoint& ckpt, std::span<const scenes::SceneSample> data, bool use_cd);

struct RecoveryImage {
  std::int64_t index = 0;
  int objects = 0;
  int recovered = 0;
  int background_slot = 0;
  model::MaskStack final_masks;
  refine::RefineTrace trace;
  bool monotone = true;  // max conflict never increased along the trace
};

struct RecoveryReport {
  double threshold = 0.0;
  double mean_recovery = 0.0;  // mean over images with objects of recovered / objects
  bool all_monotone = true;
  std::vector<RecoveryImage> images;
};

// Slot whose argmax region holds the most border pixels (lowest index on ties).
int background_slot(const model::MaskStack& masks);

// Keeps only the background slot, runs the add loop (no merge), and scores every
// ground-truth object as recovered when some final mask reaches IoU >= 0.5.
RecoveryReport corrupt_and_recover(const Checkpoint& ckpt, std::span<const scenes::SceneSample> data);

std::vector<nlohmann::ordered_json> recovery_records(const RecoveryReport& report);

}  // namespace tdg::train
