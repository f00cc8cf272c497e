#pragma once

#include <cstdint>

#include "tdg/model.hpp"

namespace tdg::guidance {

/// Scalar loss terms of one step and their weighted total.
struct LossReport {
  double l1 = 0.0;
  double perceptual = 0.0;
  double tdg = 0.0;
  double total = 0.0;
  double lambda_td = 0.0;
};

// total = l1 + perceptual + lambda_td * tdg. Negative components are rejected.
LossReport total_loss(double l1, double perceptual, double tdg, double lambda_td);

// Same weighted sum on the tape; absent terms are passed as invalid Vars.
template <typename T>
ad::Var<T> total_loss(const ad::Var<T>& l1, const ad::Var<T>& perceptual, const ad::Var<T>& tdg, T lambda_td);

// Mask-weighted sum of slots on the feature grid, gradient-blocked.
// slots (N,K,C_s) unit-normalized; masks (N,K,H,W) -> (N,C_s,H/s,W/s).
template <typename T>
ad::Var<T> build_guidance(const ad::Var<T>& slots, const ad::Var<T>& masks, int stride);

// Backbone features of the stop-gradiented reconstruction.
template <typename T>
ad::Var<T> reencode_reconstruction(const model::Binding<T>& p, const model::ModelConfig& cfg,
                                   const ad::Var<T>& reconstruction);

// 1 - mean over locations of the channel-axis cosine similarity; in [0, 2].
template <typename T>
ad::Var<T> tdg_loss(const ad::Var<T>& projected, const ad::Var<T>& guidance);

/// Frozen three-stage conv pyramid used as the perceptual feature extractor.
struct PerceptualSpec {
  static constexpr int kStages = 3;
  static constexpr int kWidths[kStages] = {16, 32, 32};
  static constexpr int kStrides[kStages] = {1, 2, 2};
};

// Random, fixed weights under the "perceptual." prefix.
template <typename T>
ParamMap<T> init_perceptual_params(std::uint64_t seed);

// Per-stage feature taps (pre-activation) of images (N,3,H,W).
template <typename T>
std::vector<ad::Var<T>> perceptual_features(const model::Binding<T>& frozen, const ad::Var<T>& images);

template <typename T>
struct ReconstructionLoss {
  ad::Var<T> l1;
  ad::Var<T> perceptual;
};

// l1 = mean |R - I|; perceptual = mean over stages and locations of the cosine
// distance between channel-normalized features, computed as 0.5 |u - v|^2 so that
// two zero vectors are at distance 0.
template <typename T>
ReconstructionLoss<T> reconstruction_loss(const model::Binding<T>& frozen, const ad::Var<T>& reconstruction,
                                          const ad::Var<T>& images);

// Guidance field for one image in analysis precision: (C_s, h, w).
Tensor<double> guidance_field(const model::SlotSet& slots, const model::MaskStack& masks, int stride);

}  // namespace tdg::guidance
