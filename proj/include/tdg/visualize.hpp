#pragma once

#include <array>
#include <cstdint>
#include <filesystem>

#include "tdg/model.hpp"
#include "tdg/png_io.hpp"
#include "tdg/refine.hpp"
#include "tdg/trainer.hpp"

namespace tdg::viz {

// Fixed 16-entry palette indexed by slot (wraps around).
std::array<std::uint8_t, 3> palette(int slot);

// (3,H,W) image in [0, 1] to an RGB raster; values are clamped.
png::Raster rgb_raster(const Tensor<double>& image);

// Nearest-neighbor enlargement by an integer factor.
png::Raster enlarge(const png::Raster& r, int factor);

// Image blended with the palette color of each pixel's argmax slot.
png::Raster mask_overlay(const Tensor<float>& image, const model::MaskStack& masks, double alpha = 0.5);

// Gray heat map of conflict values in [0, 2] enlarged by `scale`, with a legend
// strip below spanning 0..2 and a tick at th.
png::Raster conflict_heatmap(const Tensor<double>& conflict, double th, int scale);

inline constexpr int kLegendRows = 8;

// Writes <stem>_overlay.png, _recon.png, _pca.png and _conflict.png for one image.
void render_sample(const model::SlotModel& model, const Tensor<float>& image, double th,
                   const std::filesystem::path& dir, const std::string& stem);

// Conflict map of every iteration plus the final overlay for a corrupt-and-recover run.
void render_recovery(const train::RecoveryImage& r, const Tensor<float>& image, double th, int stride,
                     const std::filesystem::path& dir);

}  // namespace tdg::viz
