#include "tdg/experiments.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <optional>

#include "tdg/trainer.hpp"

namespace tdg::experiments {

namespace fs = std::filesystem;

const char* row_name(AblationRow row) {
  switch (row) {
    case AblationRow::kL1: return "l1";
    case AblationRow::kL1Perceptual: return "l1+perceptual";
    case AblationRow::kTdg: return "+tdg";
    case AblationRow::kTdgCd: return "+cd";
  }
  return "unknown";
}

train::TrainConfig row_config(const train::TrainConfig& base, AblationRow row, std::uint64_t seed) {
  train::TrainConfig cfg = base;
  cfg.seed = seed;
  cfg.losses = {true, row != AblationRow::kL1, row == AblationRow::kTdg || row == AblationRow::kTdgCd};
  return cfg;
}

std::string config_key(const train::TrainConfig& cfg) {
  auto j = train::to_json(cfg);
  j.erase("checkpoint_dir");
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

train::Checkpoint trained(const train::TrainConfig& cfg, std::span<const scenes::SceneSample> data,
                          const fs::path& cache_dir, std::ostream* progress) {
  train::TrainConfig run = cfg;
  const fs::path dir = cache_dir / config_key(cfg);
  run.checkpoint_dir = dir.string();
  const fs::path ckpt_path = dir / "last.tdgc";
  fs::create_directories(dir);

  std::optional<train::Trainer> trainer;
  if (fs::exists(ckpt_path)) {
    train::Checkpoint ck = train::load_checkpoint(ckpt_path);
    if (ck.step >= run.steps && ck.threshold) return ck;
    ck.config.checkpoint_dir = run.checkpoint_dir;
    trainer.emplace(std::move(ck));
  } else {
    std::ofstream(dir / "config.json") << train::to_json(run).dump(2) << '\n';
    trainer.emplace(run);
  }
  std::ofstream log(dir / "train_log.jsonl", std::ios::app);
  train::TrainOptions opts;
  opts.log = &log;
  if (progress) {
    const std::int64_t every = std::max<std::int64_t>(1, run.steps / 20);
    opts.on_step = [&, every](const train::StepRecord& r) {
      if ((r.step + 1) % every == 0) {
        *progress << "  [" << config_key(cfg) << "] step " << (r.step + 1) << "/" << run.steps
                  << " total=" << r.losses.total << std::endl;
      }
    };
  }
  return train::train(*trainer, data, opts);
}

metrics::VarianceReport mean_feature_variance(const train::Checkpoint& ckpt,
                                              std::span<const scenes::SceneSample> data) {
  if (data.empty()) throw std::invalid_argument("mean_feature_variance: empty dataset");
  const model::SlotModel model = ckpt.slot_model();
  metrics::VarianceReport acc;
  for (const auto& s : data) {
    const auto v = metrics::feature_variance(model::backbone_features(model, s.image), s.labels);
    acc.intra += v.intra;
    acc.inter += v.inter;
    acc.regions += v.regions;
  }
  const auto n = static_cast<double>(data.size());
  acc.intra /= n;
  acc.inter /= n;
  return acc;
}

}  // namespace tdg::experiments
