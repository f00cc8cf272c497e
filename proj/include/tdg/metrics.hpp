#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "tdg/model.hpp"
#include "tdg/scenes.hpp"

namespace tdg::metrics {

using scenes::LabelMap;

// Per-pixel argmax over slots (lowest index on ties).
LabelMap argmax_labels(const model::MaskStack& masks);

// Adjusted Rand index of two labelings of the same pixels (contingency-table form).
// Returns 1 when both labelings are a single cluster.
double adjusted_rand_index(std::span<const std::int32_t> a, std::span<const std::int32_t> b);

// ARI restricted to pixels whose ground-truth label is not 0. Empty when the
// ground truth has fewer than two foreground segments (ARI is undefined there).
std::optional<double> ari_fg(const LabelMap& pred, const LabelMap& gt);

// IoU matrix: rows are ground-truth segments (ascending id, background included
// when present), columns are predicted segments (ascending id).
struct IouTable {
  std::vector<std::int32_t> gt_ids;
  std::vector<std::int32_t> pred_ids;
  std::vector<std::vector<double>> iou;
};
IouTable iou_table(const LabelMap& pred, const LabelMap& gt, bool include_background);

// Maximum-weight one-to-one assignment; result[r] is the column for row r or -1.
std::vector<int> hungarian_max(const std::vector<std::vector<double>>& weights);

// Mean IoU over ground-truth segments (background included) under the optimal
// one-to-one matching; unmatched segments score 0.
double miou(const LabelMap& pred, const LabelMap& gt);

// Mean over ground-truth instances (background excluded) of the best IoU with any
// predicted segment. Empty when there are no instances.
std::optional<double> mbo(const LabelMap& pred, const LabelMap& gt);

// Mean squared error on the 0-255 scale over all pixels and channels.
double mse(const Tensor<double>& reconstruction, const Tensor<double>& image);

struct VarianceReport {
  double intra = 0.0;
  double inter = 0.0;
  std::int64_t regions = 0;
};

// Majority label of each stride x stride cell (lowest id on ties).
LabelMap downsample_labels(const LabelMap& labels, int stride);

VarianceReport feature_variance(const model::FeatureGrid& features, const LabelMap& gt);

struct PcaProjection {
  Tensor<double> components;        // (3, h, w), centered scores on the top components
  std::vector<double> eigenvalues;  // top three, descending; 0 where rank is short
  double total_variance = 0.0;      // trace of the covariance
};

PcaProjection pca_project(const model::FeatureGrid& features);

// Top-3 PCA scores min-max scaled to [0, 1]; missing components are mid-gray.
Tensor<double> pca_rgb(const model::FeatureGrid& features);

struct ImageMetrics {
  std::int64_t index = 0;
  std::optional<double> ari_fg;
  double miou = 0.0;
  std::optional<double> mbo;
  double mse = 0.0;
};

struct MetricsReport {
  double ari_fg = 0.0;
  double miou = 0.0;
  double mbo = 0.0;
  double mse = 0.0;
  std::int64_t image_count = 0;
  std::int64_t ari_skipped = 0;
  std::vector<ImageMetrics> per_image;
};

ImageMetrics score_image(std::int64_t index, const model::MaskStack& masks, const Tensor<double>& reconstruction,
                         const scenes::SceneSample& gt);

// Means of per-image values in index order; skipped ARI/mBO entries are excluded.
MetricsReport aggregate(std::vector<ImageMetrics> per_image);

// One record per image followed by one aggregate record.
std::vector<nlohmann::ordered_json> report_records(const MetricsReport& report);

}  // namespace tdg::metrics
