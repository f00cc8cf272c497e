#include "tdg/visualize.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "tdg/metrics.hpp"

namespace tdg::viz {

namespace {

constexpr std::array<std::array<std::uint8_t, 3>, 16> kPalette = {{
    {230, 25, 75},  {60, 180, 75},   {255, 225, 25}, {0, 130, 200},  {245, 130, 48},  {145, 30, 180},
    {70, 240, 240}, {240, 50, 230},  {210, 245, 60}, {250, 190, 212}, {0, 128, 128},  {220, 190, 255},
    {170, 110, 40}, {255, 250, 200}, {128, 0, 0},    {170, 255, 195},
}};

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

std::string frame_name(const char* prefix, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%03zu.png", prefix, i);
  return buf;
}

}  // namespace

std::array<std::uint8_t, 3> palette(int slot) { return kPalette[static_cast<std::size_t>(slot) % kPalette.size()]; }

png::Raster rgb_raster(const Tensor<double>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("rgb_raster: expected (3,H,W)");
  const auto h = static_cast<std::uint32_t>(image.dim(1)), w = static_cast<std::uint32_t>(image.dim(2));
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  png::Raster r{w, h, 3, std::vector<std::uint8_t>(plane * 3)};
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t c = 0; c < 3; ++c) r.pixels[p * 3 + c] = to_byte(image[static_cast<std::int64_t>(c * plane + p)]);
  }
  return r;
}

png::Raster enlarge(const png::Raster& r, int factor) {
  if (factor < 1) throw std::invalid_argument("enlarge: factor must be positive");
  png::Raster out{r.width * factor, r.height * factor, r.channels, {}};
  out.pixels.resize(static_cast<std::size_t>(out.width) * out.height * r.channels);
  for (std::uint32_t y = 0; y < out.height; ++y) {
    for (std::uint32_t x = 0; x < out.width; ++x) {
      const std::size_t src = (static_cast<std::size_t>(y / factor) * r.width + x / factor) * r.channels;
      const std::size_t dst = (static_cast<std::size_t>(y) * out.width + x) * r.channels;
      std::copy_n(r.pixels.begin() + static_cast<std::ptrdiff_t>(src), r.channels,
                  out.pixels.begin() + static_cast<std::ptrdiff_t>(dst));
    }
  }
  return out;
}

png::Raster mask_overlay(const Tensor<float>& image, const model::MaskStack& masks, double alpha) {
  const metrics::LabelMap labels = metrics::argmax_labels(masks);
  png::Raster r = rgb_raster(image.cast<double>());
  if (static_cast<std::int64_t>(r.height) != labels.height || static_cast<std::int64_t>(r.width) != labels.width) {
    throw ShapeError("mask_overlay: masks and image differ in size");
  }
  for (std::size_t p = 0; p < labels.ids.size(); ++p) {
    const auto color = palette(labels.ids[p]);
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = (1.0 - alpha) * r.pixels[p * 3 + c] + alpha * color[c];
      r.pixels[p * 3 + c] = static_cast<std::uint8_t>(std::lround(v));
    }
  }
  return r;
}

png::Raster conflict_heatmap(const Tensor<double>& conflict, double th, int scale) {
  if (conflict.rank() != 2) throw ShapeError("conflict_heatmap: expected (h,w)");
  const auto h = static_cast<std::uint32_t>(conflict.dim(0)), w = static_cast<std::uint32_t>(conflict.dim(1));
  png::Raster map{w, h, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h)};
  for (std::size_t p = 0; p < map.pixels.size(); ++p) map.pixels[p] = to_byte(conflict[static_cast<std::int64_t>(p)] / 2.0);
  png::Raster big = enlarge(map, scale);
  const std::uint32_t width = big.width;
  const auto tick = static_cast<std::uint32_t>(std::lround(std::clamp(th / 2.0, 0.0, 1.0) * (width - 1)));
  for (int row = 0; row < kLegendRows; ++row) {
    for (std::uint32_t x = 0; x < width; ++x) {
      std::uint8_t v = width > 1 ? to_byte(static_cast<double>(x) / (width - 1)) : 0;
      if (x == tick) v = row < kLegendRows / 2 ? 255 : 0;
      big.pixels.push_back(v);
    }
  }
  big.height += kLegendRows;
  return big;
}

void render_sample(const model::SlotModel& model, const Tensor<float>& image, double th,
                   const std::filesystem::path& dir, const std::string& stem) {
  std::filesystem::create_directories(dir);
  const model::Perception p = model::perceive(model, image);
  png::write(dir / (stem + "_overlay.png"), mask_overlay(image, p.masks));
  png::write(dir / (stem + "_recon.png"), rgb_raster(p.reconstruction));
  png::write(dir / (stem + "_pca.png"), enlarge(rgb_raster(metrics::pca_rgb(p.features)), p.features.stride));
  const Tensor<double> projected = model::project_features(model, p.features);
  const refine::ConflictMap cm = refine::conflict_map(projected, p.slots);
  png::write(dir / (stem + "_conflict.png"), conflict_heatmap(cm.values, th, p.features.stride));
}

void render_recovery(const train::RecoveryImage& r, const Tensor<float>& image, double th, int stride,
                     const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < r.trace.conflict_maps.size(); ++i) {
    png::write(dir / frame_name("conflict", i), conflict_heatmap(r.trace.conflict_maps[i], th, stride));
  }
  png::write(dir / "final_overlay.png", mask_overlay(image, r.final_masks));
}

}  // namespace tdg::viz
