#include "tdg/scenes.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>

#include "tdg/png_io.hpp"

namespace tdg::scenes {

namespace fs = std::filesystem;

namespace {

std::uint64_t splitmix(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  Rng(std::uint64_t seed, std::uint64_t stream) : state_(seed) {
    state_ ^= splitmix(stream);
    splitmix(state_);
  }
  double uniform() { return static_cast<double>(splitmix(state_) >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int integer(int lo, int hi) { return lo + static_cast<int>(uniform() * (hi - lo + 1)); }

 private:
  std::uint64_t state_;
};

struct Rgb {
  double r, g, b;
};

Rgb hsv(double h, double s, double v) {
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  Rgb o{0, 0, 0};
  switch (static_cast<int>(hp) % 6) {
    case 0: o = {c, x, 0}; break;
    case 1: o = {x, c, 0}; break;
    case 2: o = {0, c, x}; break;
    case 3: o = {0, x, c}; break;
    case 4: o = {x, 0, c}; break;
    default: o = {c, 0, x}; break;
  }
  const double m = v - c;
  return {o.r + m, o.g + m, o.b + m};
}

/// Sum of three random gratings in [-1, 1]; flat mode returns 0 everywhere.
class Texture {
 public:
  Texture(Rng& rng, TextureMode mode, double amplitude) : amplitude_(mode == TextureMode::kNoise ? amplitude : 0.0) {
    for (auto& w : waves_) {
      const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double freq = rng.uniform(0.25, 0.9);
      w = {freq * std::cos(angle), freq * std::sin(angle), rng.uniform(0.0, 2.0 * std::numbers::pi)};
    }
  }

  double gain(double x, double y) const {
    if (amplitude_ == 0.0) return 1.0;
    double t = 0.0;
    for (const auto& w : waves_) t += std::sin(w[0] * x + w[1] * y + w[2]);
    return 1.0 + amplitude_ * t / 3.0;
  }

 private:
  double amplitude_;
  std::array<std::array<double, 3>, 3> waves_{};
};

struct Sprite {
  ShapeKind kind;
  double cx, cy, size;

  bool contains(double px, double py) const {
    const double dx = px - cx, dy = py - cy, half = size / 2.0;
    switch (kind) {
      case ShapeKind::kDisc: return dx * dx + dy * dy <= half * half;
      case ShapeKind::kSquare: return std::abs(dx) <= half && std::abs(dy) <= half;
      case ShapeKind::kTriangle: return dy >= -half && dy <= half && std::abs(dx) <= (dy + half) / 2.0;
    }
    return false;
  }
};

const char* shape_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::kDisc: return "disc";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
  }
  return "?";
}

ShapeKind parse_shape(const std::string& s) {
  if (s == "disc") return ShapeKind::kDisc;
  if (s == "square") return ShapeKind::kSquare;
  if (s == "triangle") return ShapeKind::kTriangle;
  throw std::invalid_argument("scene config: unknown shape '" + s + "'");
}

const char* mode_name(TextureMode m) { return m == TextureMode::kFlat ? "flat" : "noise"; }

TextureMode parse_mode(const std::string& s) {
  if (s == "flat") return TextureMode::kFlat;
  if (s == "noise") return TextureMode::kNoise;
  throw std::invalid_argument("scene config: unknown texture mode '" + s + "'");
}

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

float from_byte(std::uint8_t b) { return static_cast<float>(b) / 255.0f; }

constexpr int kPlacementRetries = 200;

}  // namespace

void SceneConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("scene config: " + what); };
  if (height <= 0 || width <= 0) fail("image size must be positive");
  if (min_objects < 1 || min_objects > max_objects) fail("need 1 <= min_objects <= max_objects");
  if (max_objects > 255) fail("at most 255 objects fit the 8-bit label encoding");
  if (shapes.empty()) fail("shape vocabulary is empty");
  if (min_size < 2 || min_size > max_size) fail("need 2 <= min_size <= max_size");
  if (max_size > std::min(height, width)) fail("max_size exceeds the image");
}

nlohmann::ordered_json to_json(const SceneConfig& c) {
  nlohmann::ordered_json j;
  j["height"] = c.height;
  j["width"] = c.width;
  j["min_objects"] = c.min_objects;
  j["max_objects"] = c.max_objects;
  std::vector<std::string> shapes;
  for (auto s : c.shapes) shapes.emplace_back(shape_name(s));
  j["shapes"] = shapes;
  j["min_size"] = c.min_size;
  j["max_size"] = c.max_size;
  j["palette"] = mode_name(c.palette);
  j["background"] = mode_name(c.background);
  j["occlusion"] = c.occlusion;
  j["seed"] = c.seed;
  return j;
}

SceneConfig scene_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("scene config: expected an object");
  SceneConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "height") c.height = v.get<int>();
    else if (key == "width") c.width = v.get<int>();
    else if (key == "min_objects") c.min_objects = v.get<int>();
    else if (key == "max_objects") c.max_objects = v.get<int>();
    else if (key == "shapes") {
      c.shapes.clear();
      for (const auto& s : v) c.shapes.push_back(parse_shape(s.get<std::string>()));
    } else if (key == "min_size") c.min_size = v.get<int>();
    else if (key == "max_size") c.max_size = v.get<int>();
    else if (key == "palette") c.palette = parse_mode(v.get<std::string>());
    else if (key == "background") c.background = parse_mode(v.get<std::string>());
    else if (key == "occlusion") c.occlusion = v.get<bool>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else throw std::invalid_argument("scene config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

SceneSample generate_scene(const SceneConfig& cfg, std::int64_t index) {
  cfg.validate();
  Rng rng(cfg.seed, static_cast<std::uint64_t>(index));
  const int h = cfg.height, w = cfg.width;
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;

  const Rgb bg{rng.uniform(0.05, 0.35), rng.uniform(0.05, 0.35), rng.uniform(0.05, 0.35)};
  const Texture bg_tex(rng, cfg.background, 0.35);
  const int wanted = rng.integer(cfg.min_objects, cfg.max_objects);

  std::vector<std::int32_t> owner(static_cast<std::size_t>(hw), 0);
  std::vector<std::int64_t> visible;  // per placed object
  std::vector<Rgb> colors;
  std::vector<Texture> textures;

  for (int obj = 0; obj < wanted; ++obj) {
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementRetries && !placed; ++attempt) {
      Sprite s{cfg.shapes[static_cast<std::size_t>(rng.integer(0, static_cast<int>(cfg.shapes.size()) - 1))],
                      0.0, 0.0, rng.uniform(cfg.min_size, cfg.max_size)};
      s.cx = rng.uniform(s.size / 2.0, w - s.size / 2.0);
      s.cy = rng.uniform(s.size / 2.0, h - s.size / 2.0);
      const Rgb color = hsv(rng.uniform(), rng.uniform(0.55, 1.0), rng.uniform(0.6, 1.0));
      const Texture tex(rng, cfg.palette, 0.25);

      std::vector<std::int64_t> cover;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          if (s.contains(x + 0.5, y + 0.5)) cover.push_back(static_cast<std::int64_t>(y) * w + x);
        }
      }
      if (cover.empty()) continue;
      std::vector<std::int64_t> lost(visible.size(), 0);
      bool overlaps = false;
      for (auto p : cover) {
        if (owner[p] != 0) {
          overlaps = true;
          ++lost[owner[p] - 1];
        }
      }
      if (overlaps && !cfg.occlusion) continue;
      bool hides = false;
      for (std::size_t i = 0; i < visible.size(); ++i) hides = hides || visible[i] - lost[i] < 1;
      if (hides) continue;

      const auto id = static_cast<std::int32_t>(visible.size() + 1);
      for (std::size_t i = 0; i < visible.size(); ++i) visible[i] -= lost[i];
      for (auto p : cover) owner[p] = id;
      visible.push_back(static_cast<std::int64_t>(cover.size()));
      colors.push_back(color);
      textures.push_back(tex);
      placed = true;
    }
    if (!placed && obj < cfg.min_objects) {
      throw SceneError("generate_scene: could not place object " + std::to_string(obj + 1) + " of at least " +
                       std::to_string(cfg.min_objects) + " after " + std::to_string(kPlacementRetries) +
                       " attempts (index " + std::to_string(index) + ", seed " + std::to_string(cfg.seed) +
                       ", occlusion " + (cfg.occlusion ? "on" : "off") + ")");
    }
    if (!placed) break;
  }

  SceneSample out;
  out.image = Tensor<float>(Shape{3, h, w});
  out.labels = {h, w, owner};
  out.num_objects = static_cast<int>(visible.size());
  float* img = out.image.data().data();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::int64_t p = static_cast<std::int64_t>(y) * w + x;
      const int id = owner[p];
      const Rgb base = id == 0 ? bg : colors[id - 1];
      const double g = id == 0 ? bg_tex.gain(x, y) : textures[id - 1].gain(x, y);
      img[p] = static_cast<float>(std::clamp(base.r * g, 0.0, 1.0));
      img[hw + p] = static_cast<float>(std::clamp(base.g * g, 0.0, 1.0));
      img[2 * hw + p] = static_cast<float>(std::clamp(base.b * g, 0.0, 1.0));
    }
  }
  return out;
}

SceneSample quantized(const SceneSample& s) {
  SceneSample q = s;
  for (float& v : q.image.data()) v = from_byte(to_byte(v));
  return q;
}

std::string sample_name(const char* prefix, std::int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%06lld.png", prefix, static_cast<long long>(index));
  return buf;
}

void write_dataset(const SceneConfig& cfg, std::int64_t count, const fs::path& dir) {
  cfg.validate();
  if (count < 0) throw DatasetError("write_dataset: negative count");
  fs::create_directories(dir);
  for (std::int64_t i = 0; i < count; ++i) {
    const SceneSample s = generate_scene(cfg, i);
    const auto h = static_cast<std::uint32_t>(cfg.height), w = static_cast<std::uint32_t>(cfg.width);
    png::Raster img{w, h, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h * 3)};
    const std::size_t hw = static_cast<std::size_t>(w) * h;
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t c = 0; c < 3; ++c) img.pixels[p * 3 + c] = to_byte(s.image[static_cast<std::int64_t>(c * hw + p)]);
    }
    png::Raster lbl{w, h, 1, std::vector<std::uint8_t>(hw)};
    for (std::size_t p = 0; p < hw; ++p) lbl.pixels[p] = static_cast<std::uint8_t>(s.labels.ids[p]);
    png::write(dir / sample_name("img", i), img);
    png::write(dir / sample_name("lbl", i), lbl);
  }
  nlohmann::ordered_json m;
  m["format"] = "tdg-sprites";
  m["version"] = kDatasetVersion;
  m["count"] = count;
  m["config"] = to_json(cfg);
  std::ofstream(dir / "manifest.json") << m.dump(2) << '\n';
}

Dataset::Dataset(fs::path dir) : dir_(std::move(dir)) {
  std::ifstream in(dir_ / "manifest.json");
  if (!in) throw DatasetError("dataset: missing manifest.json in " + dir_.string());
  nlohmann::json m;
  try {
    in >> m;
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(std::string("dataset: malformed manifest: ") + e.what());
  }
  const int version = m.value("version", -1);
  if (version != kDatasetVersion) {
    throw DatasetError("dataset: unsupported manifest version " + std::to_string(version) + " (expected " +
                       std::to_string(kDatasetVersion) + ")");
  }
  count_ = m.at("count").get<std::int64_t>();
  config_ = scene_config_from_json(m.at("config"));
}

SceneSample Dataset::load(std::int64_t index) const {
  if (index < 0 || index >= count_) throw DatasetError("dataset: index out of range", index);
  const auto h = static_cast<std::uint32_t>(config_.height), w = static_cast<std::uint32_t>(config_.width);
  png::Raster img, lbl;
  try {
    img = png::read(dir_ / sample_name("img", index));
  } catch (const png::PngError& e) {
    throw DatasetError("dataset: sample " + std::to_string(index) + ": bad image file: " + e.what(), index);
  }
  try {
    lbl = png::read(dir_ / sample_name("lbl", index));
  } catch (const png::PngError& e) {
    throw DatasetError("dataset: sample " + std::to_string(index) + ": bad label file: " + e.what(), index);
  }
  if (img.width != w || img.height != h || img.channels != 3) {
    throw DatasetError("dataset: sample " + std::to_string(index) + ": image has wrong dimensions", index);
  }
  if (lbl.width != w || lbl.height != h || lbl.channels != 1) {
    throw DatasetError("dataset: sample " + std::to_string(index) + ": label file has wrong dimensions", index);
  }
  SceneSample s;
  const std::size_t hw = static_cast<std::size_t>(w) * h;
  s.image = Tensor<float>(Shape{3, h, w});
  for (std::size_t p = 0; p < hw; ++p) {
    for (std::size_t c = 0; c < 3; ++c) s.image[static_cast<std::int64_t>(c * hw + p)] = from_byte(img.pixels[p * 3 + c]);
  }
  s.labels = {h, w, std::vector<std::int32_t>(lbl.pixels.begin(), lbl.pixels.end())};
  std::set<std::int32_t> ids(s.labels.ids.begin(), s.labels.ids.end());
  ids.erase(0);
  const std::int32_t top = ids.empty() ? 0 : *ids.rbegin();
  if (static_cast<std::int32_t>(ids.size()) != top) {
    throw DatasetError("dataset: sample " + std::to_string(index) + ": label ids are not contiguous", index);
  }
  s.num_objects = top;
  return s;
}

std::vector<SceneSample> Dataset::load_all() const {
  std::vector<SceneSample> out;
  out.reserve(static_cast<std::size_t>(count_));
  for (std::int64_t i = 0; i < count_; ++i) out.push_back(load(i));
  return out;
}

std::vector<SceneSample> read_dataset(const fs::path& dir) { return Dataset(dir).load_all(); }

std::vector<SceneSample> generate_dataset(const SceneConfig& cfg, std::int64_t count, std::int64_t first) {
  std::vector<SceneSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) out.push_back(quantized(generate_scene(cfg, first + i)));
  return out;
}

}  // namespace tdg::scenes
