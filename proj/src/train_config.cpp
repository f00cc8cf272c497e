#include "tdg/train_config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace tdg::train {

namespace {

[[noreturn]] void unknown_key(const std::string& where, const std::string& key) {
  throw std::invalid_argument(where + ": unknown key '" + key + "'");
}

void require_object(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
}

LossToggles toggles_from_json(const nlohmann::json& j) {
  require_object(j, "losses");
  LossToggles t;
  for (const auto& [key, v] : j.items()) {
    if (key == "l1") t.l1 = v.get<bool>();
    else if (key == "perceptual") t.perceptual = v.get<bool>();
    else if (key == "tdg") t.tdg = v.get<bool>();
    else unknown_key("losses", key);
  }
  return t;
}

OptimizerConfig optimizer_from_json(const nlohmann::json& j) {
  require_object(j, "optimizer");
  OptimizerConfig o;
  for (const auto& [key, v] : j.items()) {
    if (key == "lr") o.lr = v.get<double>();
    else if (key == "warmup_steps") o.warmup_steps = v.get<std::int64_t>();
    else if (key == "clip_norm") o.clip_norm = v.get<double>();
    else if (key == "beta1") o.beta1 = v.get<double>();
    else if (key == "beta2") o.beta2 = v.get<double>();
    else if (key == "epsilon") o.epsilon = v.get<double>();
    else unknown_key("optimizer", key);
  }
  return o;
}

refine::RefineConfig refine_from_json(const nlohmann::json& j) {
  require_object(j, "refine");
  refine::RefineConfig r;
  for (const auto& [key, v] : j.items()) {
    if (key == "threshold") r.threshold = v.get<double>();
    else if (key == "max_added_slots") r.max_added_slots = v.get<int>();
    else if (key == "calibration_size") r.calibration_size = v.get<int>();
    else if (key == "per_image_threshold") r.per_image_threshold = v.get<bool>();
    else unknown_key("refine", key);
  }
  return r;
}

}  // namespace

double OptimizerConfig::lr_at(std::int64_t step) const {
  if (warmup_steps <= 0 || step + 1 >= warmup_steps) return lr;
  return lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("train config: " + what); };
  model.validate();
  scenes.validate();
  refine.validate();
  if (!losses.l1 && !losses.perceptual && !losses.tdg) fail("at least one loss term must be enabled");
  if (!(lambda_td >= 0.0)) fail("lambda_td must be non-negative");
  if (!(optimizer.lr > 0.0)) fail("optimizer.lr must be positive");
  if (optimizer.warmup_steps < 0) fail("optimizer.warmup_steps must be non-negative");
  if (!(optimizer.clip_norm > 0.0)) fail("optimizer.clip_norm must be positive");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
    fail("optimizer betas must lie in [0, 1)");
  }
  if (!(optimizer.epsilon > 0.0)) fail("optimizer.epsilon must be positive");
  if (batch_size < 1) fail("batch_size must be positive");
  if (steps < 0) fail("steps must be non-negative");
  if (eval_interval < 0) fail("eval_interval must be non-negative");
  if (eval_images < 0) fail("eval_images must be non-negative");
  if (dataset_size < 1) fail("dataset_size must be positive");
  if (scenes.height != model.image_height || scenes.width != model.image_width) {
    fail("scene size must equal the model's image size");
  }
  if (scenes.max_objects > model.num_slots - 1) fail("scenes.max_objects must be at most num_slots - 1");
}

nlohmann::ordered_json to_json(const model::ModelConfig& c) {
  nlohmann::ordered_json j;
  j["image_height"] = c.image_height;
  j["image_width"] = c.image_width;
  j["stride"] = c.stride;
  j["feature_channels"] = c.feature_channels;
  j["slot_dim"] = c.slot_dim;
  j["num_slots"] = c.num_slots;
  j["slot_iters"] = c.slot_iters;
  j["projection_hidden"] = c.projection_hidden;
  j["decoder_channels"] = c.decoder_channels;
  j["bilevel_init"] = c.bilevel_init;
  return j;
}

model::ModelConfig model_config_from_json(const nlohmann::json& j) {
  require_object(j, "model");
  model::ModelConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "image_height") c.image_height = v.get<int>();
    else if (key == "image_width") c.image_width = v.get<int>();
    else if (key == "stride") c.stride = v.get<int>();
    else if (key == "feature_channels") c.feature_channels = v.get<int>();
    else if (key == "slot_dim") c.slot_dim = v.get<int>();
    else if (key == "num_slots") c.num_slots = v.get<int>();
    else if (key == "slot_iters") c.slot_iters = v.get<int>();
    else if (key == "projection_hidden") c.projection_hidden = v.get<int>();
    else if (key == "decoder_channels") c.decoder_channels = v.get<std::vector<int>>();
    else if (key == "bilevel_init") c.bilevel_init = v.get<bool>();
    else unknown_key("model", key);
  }
  c.validate();
  return c;
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["model"] = to_json(c.model);
  j["scenes"] = scenes::to_json(c.scenes);
  j["losses"] = {{"l1", c.losses.l1}, {"perceptual", c.losses.perceptual}, {"tdg", c.losses.tdg}};
  j["lambda_td"] = c.lambda_td;
  nlohmann::ordered_json o;
  o["lr"] = c.optimizer.lr;
  o["warmup_steps"] = c.optimizer.warmup_steps;
  o["clip_norm"] = c.optimizer.clip_norm;
  o["beta1"] = c.optimizer.beta1;
  o["beta2"] = c.optimizer.beta2;
  o["epsilon"] = c.optimizer.epsilon;
  j["optimizer"] = o;
  j["batch_size"] = c.batch_size;
  j["steps"] = c.steps;
  j["eval_interval"] = c.eval_interval;
  j["eval_images"] = c.eval_images;
  j["dataset_size"] = c.dataset_size;
  j["seed"] = c.seed;
  j["checkpoint_dir"] = c.checkpoint_dir;
  nlohmann::ordered_json r;
  r["threshold"] = c.refine.threshold;
  r["max_added_slots"] = c.refine.max_added_slots;
  r["calibration_size"] = c.refine.calibration_size;
  r["per_image_threshold"] = c.refine.per_image_threshold;
  j["refine"] = r;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  require_object(j, "train config");
  TrainConfig c;
  bool cap_given = false;
  for (const auto& [key, v] : j.items()) {
    if (key == "model") c.model = model_config_from_json(v);
    else if (key == "scenes") c.scenes = scenes::scene_config_from_json(v);
    else if (key == "losses") c.losses = toggles_from_json(v);
    else if (key == "lambda_td") c.lambda_td = v.get<double>();
    else if (key == "optimizer") c.optimizer = optimizer_from_json(v);
    else if (key == "batch_size") c.batch_size = v.get<int>();
    else if (key == "steps") c.steps = v.get<std::int64_t>();
    else if (key == "eval_interval") c.eval_interval = v.get<std::int64_t>();
    else if (key == "eval_images") c.eval_images = v.get<std::int64_t>();
    else if (key == "dataset_size") c.dataset_size = v.get<std::int64_t>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "checkpoint_dir") c.checkpoint_dir = v.get<std::string>();
    else if (key == "refine") {
      c.refine = refine_from_json(v);
      cap_given = v.contains("max_added_slots");
    } else {
      unknown_key("train config", key);
    }
  }
  if (!cap_given) c.refine.max_added_slots = 2 * c.model.num_slots;
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  return train_config_from_json(j);
}

}  // namespace tdg::train
