#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tdg/adam.hpp"
#include "tdg/ops.hpp"
#include "tdg/tape.hpp"
#include "tdg/tensor.hpp"

namespace tdg::model {

/// Architecture hyperparameters. The backbone always downsamples by 4.
struct ModelConfig {
  int image_height = 64;
  int image_width = 64;
  int stride = 4;
  int feature_channels = 64;
  int slot_dim = 64;
  int num_slots = 7;
  int slot_iters = 3;
  int projection_hidden = 128;
  std::vector<int> decoder_channels = {64, 32, 32};
  // Detach slots before the final iteration and pass its gradient straight to the
  // learned queries. Forward values are unchanged.
  bool bilevel_init = true;

  int grid_height() const { return image_height / stride; }
  int grid_width() const { return image_width / stride; }
  int tokens() const { return grid_height() * grid_width(); }

  // Throws std::invalid_argument naming the first violated constraint.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// K slot vectors of width C_s, one per row.
struct SlotSet {
  Tensor<double> slots;  // (K, C_s)
  bool normalized = false;

  std::int64_t count() const { return slots.dim(0); }
  std::int64_t dim() const { return slots.dim(1); }
  std::vector<double> row(std::int64_t k) const;
};

// Returns `s` with every row scaled to unit length.
SlotSet normalize_slots(const SlotSet& s);

/// Per-slot soft masks; every pixel's column sums to one.
struct MaskStack {
  Tensor<double> masks;  // (K, H, W)
};

struct FeatureGrid {
  Tensor<double> features;  // (C, h, w)
  int stride = 4;
};

/// Handle to every parameter of a model bound as leaves on one tape.
template <typename T>
class Binding {
 public:
  Binding(ad::Tape<T>& tape, const ParamMap<T>& params, bool requires_grad);

  const ad::Var<T>& operator()(const std::string& name) const;
  ad::Tape<T>& tape() const { return *tape_; }
  // Gradient of every bound parameter (zero-filled where none arrived).
  ParamMap<T> grads() const;
  const std::map<std::string, ad::Var<T>>& vars() const { return vars_; }

 private:
  ad::Tape<T>* tape_;
  std::map<std::string, ad::Var<T>> vars_;
};

// Fresh parameters for `cfg`, deterministic in `seed`.
template <typename T>
ParamMap<T> init_params(const ModelConfig& cfg, std::uint64_t seed);

// Module of a parameter name: "backbone", "encoder", "decoder" or "projection".
std::string param_group(const std::string& name);

/// Batched tape-level pathway. Images are (N,3,H,W); features (N,C_f,h,w);
/// slots (N,K,C_s); masks (N,K,H,W).
template <typename T>
ad::Var<T> encode_backbone(const Binding<T>& p, const ModelConfig& cfg, const ad::Var<T>& images);

template <typename T>
ad::Var<T> initial_slots(const Binding<T>& p, const ModelConfig& cfg, std::int64_t batch);

template <typename T>
struct SlotAttentionOutput {
  ad::Var<T> slots;      // (N,K,C_s), not normalized
  ad::Var<T> attention;  // (N,K,L), columns sum to one over K
};

template <typename T>
SlotAttentionOutput<T> slot_attention(const Binding<T>& p, const ModelConfig& cfg, const ad::Var<T>& features,
                                      const ad::Var<T>& init, int iters);

template <typename T>
struct Decoded {
  ad::Var<T> reconstruction;  // (N,3,H,W)
  ad::Var<T> masks;           // (N,K,H,W)
};

template <typename T>
Decoded<T> decode_slots(const Binding<T>& p, const ModelConfig& cfg, const ad::Var<T>& slots);

// Pointwise two-layer MLP C_f -> hidden -> C_s; (N,C_f,h,w) -> (N,C_s,h,w).
template <typename T>
ad::Var<T> project(const Binding<T>& p, const ModelConfig& cfg, const ad::Var<T>& features);

template <typename T>
struct BottomUp {
  ad::Var<T> features;
  ad::Var<T> slots;  // unit-normalized
  ad::Var<T> reconstruction;
  ad::Var<T> masks;
  ad::Var<T> attention;
};

template <typename T>
BottomUp<T> forward_bottom_up(const Binding<T>& p, const ModelConfig& cfg, const ad::Var<T>& images);

/// Trained weights plus the frozen perceptual-feature weights.
struct SlotModel {
  ModelConfig config;
  ParamMap<float> params;
  ParamMap<float> frozen;
};

/// Single-image inference results in analysis precision.
struct Perception {
  FeatureGrid features;
  SlotSet slots;
  Tensor<double> reconstruction;  // (3,H,W)
  MaskStack masks;
  Tensor<double> attention;  // (K, h*w)
};

// Bottom-up pass on one (3,H,W) image without recording gradients.
Perception perceive(const SlotModel& model, const Tensor<float>& image);

// Decodes an arbitrary slot set (K' >= 1); returns reconstruction (3,H,W) and masks.
std::pair<Tensor<double>, MaskStack> decode(const SlotModel& model, const SlotSet& slots);

// P(F) for one feature grid: (C_s, h, w).
Tensor<double> project_features(const SlotModel& model, const FeatureGrid& features);

// Backbone features of one image.
FeatureGrid backbone_features(const SlotModel& model, const Tensor<float>& image);

}  // namespace tdg::model
