#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tdg/tensor.hpp"

namespace tdg::scenes {

enum class ShapeKind { kDisc, kSquare, kTriangle };
enum class TextureMode { kFlat, kNoise };

struct SceneConfig {
  int height = 64;
  int width = 64;
  int min_objects = 2;
  int max_objects = 5;
  std::vector<ShapeKind> shapes = {ShapeKind::kDisc, ShapeKind::kSquare, ShapeKind::kTriangle};
  int min_size = 12;
  int max_size = 24;
  TextureMode palette = TextureMode::kNoise;
  TextureMode background = TextureMode::kNoise;
  bool occlusion = true;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const SceneConfig&) const = default;
};

nlohmann::ordered_json to_json(const SceneConfig& cfg);
// Rejects unknown keys; absent keys keep their defaults.
SceneConfig scene_config_from_json(const nlohmann::json& j);

/// Instance ids per pixel, row-major; 0 is background.
struct LabelMap {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::int32_t> ids;

  std::int32_t at(std::int64_t y, std::int64_t x) const { return ids[static_cast<std::size_t>(y * width + x)]; }
  bool operator==(const LabelMap&) const = default;
};

struct SceneSample {
  Tensor<float> image;  // (3, H, W) in [0, 1]
  LabelMap labels;
  int num_objects = 0;
};

class SceneError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Pure function of (cfg.seed, index): objects drawn back to front, labels hold the
// topmost object; fully hidden objects are redrawn.
SceneSample generate_scene(const SceneConfig& cfg, std::int64_t index);

// Image values snapped to the 8-bit grid (what a dataset round trip yields).
SceneSample quantized(const SceneSample& s);

class DatasetError : public std::runtime_error {
 public:
  DatasetError(const std::string& what, std::int64_t index = -1) : std::runtime_error(what), index_(index) {}
  // Sample the failure refers to, or -1 for dataset-level problems.
  std::int64_t index() const { return index_; }

 private:
  std::int64_t index_;
};

inline constexpr int kDatasetVersion = 1;

// Writes manifest.json plus img_%06d.png / lbl_%06d.png for indices [0, count).
void write_dataset(const SceneConfig& cfg, std::int64_t count, const std::filesystem::path& dir);

/// Reader over a dataset directory; samples are loaded on demand.
class Dataset {
 public:
  explicit Dataset(std::filesystem::path dir);

  std::int64_t size() const { return count_; }
  const SceneConfig& config() const { return config_; }
  SceneSample load(std::int64_t index) const;
  std::vector<SceneSample> load_all() const;

 private:
  std::filesystem::path dir_;
  SceneConfig config_;
  std::int64_t count_ = 0;
};

std::vector<SceneSample> read_dataset(const std::filesystem::path& dir);

// In-memory dataset of generated (and quantized) samples, indices [first, first + count).
std::vector<SceneSample> generate_dataset(const SceneConfig& cfg, std::int64_t count, std::int64_t first = 0);

std::string sample_name(const char* prefix, std::int64_t index);

}  // namespace tdg::scenes
