#pragma once

// Independent reference implementations used to cross-check the library.
// They favor direct loops over speed and share no code with src/.

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "tdg/adam.hpp"
#include "tdg/model.hpp"
#include "tdg/scenes.hpp"
#include "tdg/tensor.hpp"

namespace tdg::oracle {

using Rng = std::mt19937_64;

Tensor<double> uniform(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0);
// Magnitudes in [lo, hi] with random signs; keeps values clear of kinks at zero.
Tensor<double> signed_uniform(const Shape& shape, Rng& rng, double lo, double hi);

// Direct NCHW convolution by sliding window.
Tensor<double> conv2d(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* bias, int stride,
                      int pad);

struct SlotAttentionResult {
  Tensor<double> slots;      // (K, C_s), before normalization
  Tensor<double> attention;  // (K, L), softmax over K
};

// Slot attention for one image with features (C_f, h, w), written as scalar loops.
SlotAttentionResult slot_attention(const ParamMap<double>& p, const model::ModelConfig& cfg,
                                   const Tensor<double>& features, const Tensor<double>& init, int iters);

struct DecodeResult {
  Tensor<double> reconstruction;  // (3, H, W)
  Tensor<double> masks;           // (K, H, W)
};

// Spatial-broadcast decoder for one slot set (K, C_s) with direct convolutions.
DecodeResult decode(const ParamMap<double>& p, const model::ModelConfig& cfg, const Tensor<double>& slots);

// ARI from explicit pair enumeration.
double ari_pairs(std::span<const std::int32_t> a, std::span<const std::int32_t> b);

// mIoU by enumerating every one-to-one assignment of GT segments to predictions.
double miou_enumerate(const scenes::LabelMap& pred, const scenes::LabelMap& gt);

// Best-overlap per instance straight from the pixel definition.
double mbo_direct(const scenes::LabelMap& pred, const scenes::LabelMap& gt);

struct AddResult {
  Tensor<double> slots;
  std::vector<std::int64_t> locations;
  bool hit_cap = false;
};

// Conflict-driven slot addition, recomputing the full conflict map every iteration.
AddResult add_slots(const Tensor<double>& slots, const Tensor<double>& projected, double th, int cap);

// Average-linkage dendrogram built with Lance-Williams updates, cut below th.
// Groups sorted by smallest member.
std::vector<std::vector<int>> dendrogram_cut(const std::vector<std::vector<double>>& dist, double th);

struct MergeResult {
  Tensor<double> slots;
  std::vector<std::vector<int>> groups;
};

// Repeats dendrogram_cut with normalized cluster means until nothing merges.
MergeResult merge(const Tensor<double>& slots, double th);

}  // namespace tdg::oracle
