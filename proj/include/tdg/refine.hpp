#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "tdg/model.hpp"

namespace tdg::refine {

/// Distance from each location's projected feature to its nearest slot.
struct ConflictMap {
  Tensor<double> values;     // (h, w), each in [0, 2]
  std::vector<int> nearest;  // raster order; lowest slot index on ties

  std::int64_t height() const { return values.dim(0); }
  std::int64_t width() const { return values.dim(1); }
};

struct RefineConfig {
  static constexpr double kThresholdFloor = 0.05;

  double threshold = 0.5;
  int max_added_slots = 14;
  int calibration_size = 64;
  // Calibrate th from the slots of each image rather than globally.
  bool per_image_threshold = false;

  void validate() const;
};

struct AddEvent {
  std::int64_t location = 0;  // raster index on the feature grid
  double conflict = 0.0;      // conflict at that location before the addition
  std::vector<double> slot;   // unit-normalized projection appended as the new slot
};

struct RefineTrace {
  std::vector<AddEvent> additions;
  std::vector<std::vector<int>> merge_groups;  // indices into the post-addition slot set
  std::int64_t initial_count = 0;
  std::int64_t final_count = 0;
  // Max conflict before the first addition and after each one.
  std::vector<double> max_conflict;
  // Full conflict map at every iteration, same indexing as max_conflict.
  std::vector<Tensor<double>> conflict_maps;
  bool hit_cap = false;
  double threshold = 0.0;
};

// 1 - cos(projected(x), slot) minimized over slots. projected is (C_s, h, w).
ConflictMap conflict_map(const Tensor<double>& projected, const model::SlotSet& slots);
ConflictMap conflict_map(const model::SlotModel& model, const model::FeatureGrid& features,
                         const model::SlotSet& slots);

// 0.5 x mean over slot sets of their mean pairwise cosine distance, floored at kThresholdFloor.
// Sets with fewer than two slots are ignored; if none remain the call throws.
double calibrate_threshold(std::span<const model::SlotSet> slot_sets);
double calibrate_threshold(const model::SlotModel& model, std::span<const Tensor<float>> images);

// Greedy loop: while the largest conflict exceeds th and the cap allows, append
// the normalized projection at that location (lowest raster index on ties).
std::pair<model::SlotSet, RefineTrace> add_conflicting_slots(const model::SlotSet& slots,
                                                             const Tensor<double>& projected,
                                                             const RefineConfig& cfg);

struct MergeResult {
  model::SlotSet slots;
  std::vector<std::vector<int>> groups;  // members of each output slot, by input index
};

// Average-linkage agglomerative clustering on cosine distance, merging while the
// closest pair of clusters is nearer than th. Each cluster becomes the normalized
// mean of its members; rounds repeat on the merged set until no pair is closer than th.
MergeResult merge_slots(const model::SlotSet& slots, double th);

// One round of clustering without replacing members; groups ordered by smallest member.
std::vector<std::vector<int>> average_linkage_groups(const std::vector<std::vector<double>>& distances, double th);

double cosine_distance(std::span<const double> a, std::span<const double> b);

struct Refined {
  model::SlotSet slots;
  model::MaskStack masks;
  Tensor<double> reconstruction;
  RefineTrace trace;
};

// Conflict detection starting from `start` for an already perceived image.
Refined refine_from(const model::SlotModel& model, const model::Perception& perception, const model::SlotSet& start,
                    const RefineConfig& cfg, bool merge = true);

// Bottom-up pass, slot addition, merge, then decode of the final slot set.
Refined refine(const Tensor<float>& image, const model::SlotModel& model, const RefineConfig& cfg);

// Line-delimited records: one per addition, one per merge group set, one summary.
std::vector<nlohmann::ordered_json> trace_records(const RefineTrace& trace, std::int64_t image_index);

}  // namespace tdg::refine
