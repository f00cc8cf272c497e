#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "tdg/checkpoint.hpp"
#include "tdg/metrics.hpp"
#include "tdg/png_io.hpp"
#include "tdg/refine.hpp"
#include "tdg/scenes.hpp"
#include "tdg/train_config.hpp"
#include "tdg/trainer.hpp"
#include "tdg/visualize.hpp"

namespace fs = std::filesystem;
using namespace tdg;

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::string ckpt;
  std::string data;
  bool cd = false;
  std::int64_t count = -1;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> steps;
  std::optional<double> lambda_td;
};

std::string stem(const char* prefix, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%06zu", prefix, i);
  return buf;
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config " + path);
  return nlohmann::json::parse(in);
}

void write_lines(const fs::path& path, const std::vector<nlohmann::ordered_json>& records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : records) out << r.dump() << '\n';
}

void print_lines(const std::vector<nlohmann::ordered_json>& records) {
  for (const auto& r : records) std::cout << r.dump() << '\n';
}

std::vector<scenes::SceneSample> load_data(const Flags& f) {
  scenes::Dataset ds(f.data);
  std::vector<scenes::SceneSample> out;
  const std::int64_t n = f.count >= 0 ? std::min(f.count, ds.size()) : ds.size();
  for (std::int64_t i = 0; i < n; ++i) out.push_back(ds.load(i));
  return out;
}

int generate_data(const Flags& f) {
  scenes::SceneConfig cfg;
  if (!f.config.empty()) {
    const auto j = read_json(f.config);
    cfg = j.contains("scenes") ? train::train_config_from_json(j).scenes : scenes::scene_config_from_json(j);
  }
  if (f.seed) cfg.seed = *f.seed;
  scenes::write_dataset(cfg, f.count >= 0 ? f.count : 100, f.out);
  return 0;
}

int train_cmd(const Flags& f) {
  train::TrainConfig cfg = f.config.empty() ? train::TrainConfig{} : train::load_train_config(f.config);
  if (f.steps) cfg.steps = *f.steps;
  if (f.lambda_td) cfg.lambda_td = *f.lambda_td;
  if (f.seed) cfg.seed = *f.seed;
  if (!f.out.empty()) cfg.checkpoint_dir = f.out;
  cfg.validate();

  std::vector<scenes::SceneSample> data;
  if (!f.data.empty()) {
    data = load_data(f);
  } else {
    data = scenes::generate_dataset(cfg.scenes, cfg.dataset_size);
  }
  fs::create_directories(cfg.checkpoint_dir);
  std::ofstream log(fs::path(cfg.checkpoint_dir) / "train_log.jsonl");
  train::TrainOptions opts;
  opts.log = &log;
  if (cfg.eval_images > 0) {
    opts.eval_set = scenes::generate_dataset(cfg.scenes, cfg.eval_images, cfg.dataset_size);
  }
  try {
    train::train(cfg, data, opts);
  } catch (const train::NonFiniteLoss& e) {
    std::cerr << "error: non_finite_loss: step=" << e.step() << "\n";
    return 3;
  }
  return 0;
}

int eval_cmd(const Flags& f) {
  const train::Checkpoint ck = train::load_checkpoint(f.ckpt);
  const auto data = load_data(f);
  const auto ev = train::evaluate(ck, data, f.cd);
  const auto records = metrics::report_records(ev.report);
  std::vector<nlohmann::ordered_json> traces;
  for (std::size_t i = 0; i < ev.traces.size(); ++i) {
    for (auto& r : refine::trace_records(ev.traces[i], static_cast<std::int64_t>(i))) traces.push_back(std::move(r));
  }
  if (f.out.empty()) {
    print_lines(records);
    print_lines(traces);
    return 0;
  }
  fs::create_directories(f.out);
  write_lines(fs::path(f.out) / (f.cd ? "metrics_cd.jsonl" : "metrics.jsonl"), records);
  if (f.cd) write_lines(fs::path(f.out) / "traces.jsonl", traces);
  return 0;
}

int infer_cmd(const Flags& f) {
  const train::Checkpoint ck = train::load_checkpoint(f.ckpt);
  const auto data = load_data(f);
  if (data.empty()) throw std::invalid_argument("infer: empty dataset");
  const model::SlotModel model = ck.slot_model();
  refine::RefineConfig rcfg = ck.config.refine;
  rcfg.threshold = std::max(train::resolve_threshold(ck, data), refine::RefineConfig::kThresholdFloor);
  fs::create_directories(f.out);
  std::vector<nlohmann::ordered_json> records;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const refine::Refined r = refine::refine(data[i].image, model, rcfg);
    for (auto& rec : refine::trace_records(r.trace, static_cast<std::int64_t>(i))) records.push_back(std::move(rec));
    png::write(fs::path(f.out) / scenes::sample_name("masks", static_cast<std::int64_t>(i)),
               viz::mask_overlay(data[i].image, r.masks));
  }
  write_lines(fs::path(f.out) / "traces.jsonl", records);
  return 0;
}

int recover_cmd(const Flags& f) {
  const train::Checkpoint ck = train::load_checkpoint(f.ckpt);
  const auto data = load_data(f);
  const auto rep = train::corrupt_and_recover(ck, data);
  fs::create_directories(f.out);
  write_lines(fs::path(f.out) / "recovery.jsonl", train::recovery_records(rep));
  for (const auto& r : rep.images) {
    viz::render_recovery(r, data[static_cast<std::size_t>(r.index)].image, rep.threshold, ck.config.model.stride,
                         fs::path(f.out) / stem("scene", static_cast<std::size_t>(r.index)));
  }
  return 0;
}

int visualize_cmd(const Flags& f) {
  const train::Checkpoint ck = train::load_checkpoint(f.ckpt);
  const auto data = load_data(f);
  if (data.empty()) throw std::invalid_argument("visualize: empty dataset");
  const double th = std::max(train::resolve_threshold(ck, data), refine::RefineConfig::kThresholdFloor);
  const model::SlotModel model = ck.slot_model();
  for (std::size_t i = 0; i < data.size(); ++i) {
    viz::render_sample(model, data[i].image, th, f.out, stem("img", i));
  }
  return 0;
}

std::string error_kind(const std::exception& e) {
  if (const auto* c = dynamic_cast<const train::CheckpointError*>(&e)) {
    return std::string("checkpoint_") + train::checkpoint_error_name(c->kind());
  }
  if (dynamic_cast<const scenes::DatasetError*>(&e)) return "dataset";
  if (dynamic_cast<const png::PngError*>(&e)) return "png";
  if (dynamic_cast<const ShapeError*>(&e)) return "shape";
  if (dynamic_cast<const std::invalid_argument*>(&e)) return "invalid_argument";
  if (dynamic_cast<const nlohmann::json::exception*>(&e)) return "config";
  return "runtime";
}

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Slot-attention autoencoder with top-down guidance and conflict detection"};
  app.require_subcommand(1);
  Flags f;

  auto* gen = app.add_subcommand("generate-data", "Write a synthetic sprite dataset");
  gen->add_option("--config", f.config, "Scene config (JSON; a train config's scenes block is also accepted)");
  gen->add_option("--count", f.count, "Number of samples")->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", f.seed, "Override the scene seed");
  gen->add_option("--out", f.out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--config", f.config, "Train config (JSON)");
  tr->add_option("--data", f.data, "Dataset directory (default: generate in memory)");
  tr->add_option("--count", f.count, "Use the first N samples of --data")->check(CLI::NonNegativeNumber);
  tr->add_option("--out", f.out, "Checkpoint directory (overrides the config)");
  tr->add_option("--steps", f.steps, "Override total steps")->check(CLI::NonNegativeNumber);
  tr->add_option("--lambda-td", f.lambda_td, "Override the guidance loss weight")->check(CLI::NonNegativeNumber);
  tr->add_option("--seed", f.seed, "Override the training seed");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--ckpt", f.ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", f.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--count", f.count, "Evaluate the first N samples")->check(CLI::NonNegativeNumber);
  ev->add_flag("--cd", f.cd, "Refine slots with conflict detection");
  ev->add_option("--out", f.out, "Report directory (default: stdout)");

  auto* inf = app.add_subcommand("infer", "Run conflict-detection inference");
  inf->add_option("--ckpt", f.ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  inf->add_option("--data", f.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  inf->add_option("--count", f.count, "Process the first N samples")->check(CLI::NonNegativeNumber);
  inf->add_option("--out", f.out, "Output directory")->required();

  auto* rec = app.add_subcommand("corrupt-recover", "Delete object slots and recover them by conflict detection");
  rec->add_option("--ckpt", f.ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  rec->add_option("--data", f.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  rec->add_option("--count", f.count, "Process the first N samples")->check(CLI::NonNegativeNumber);
  rec->add_option("--out", f.out, "Output directory")->required();

  auto* vis = app.add_subcommand("visualize", "Render masks, reconstructions, PCA and conflict maps");
  vis->add_option("--ckpt", f.ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  vis->add_option("--data", f.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  vis->add_option("--count", f.count, "Render the first N samples")->check(CLI::NonNegativeNumber);
  vis->add_option("--out", f.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) return generate_data(f);
    if (*tr) return train_cmd(f);
    if (*ev) return eval_cmd(f);
    if (*inf) return infer_cmd(f);
    if (*rec) return recover_cmd(f);
    if (*vis) return visualize_cmd(f);
  } catch (const std::exception& e) {
    std::cerr << "error: " << error_kind(e) << ": " << one_line(e.what()) << "\n";
    return 1;
  }
  return 2;
}
