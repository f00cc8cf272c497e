#include "tdg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <random>
#include <thread>

namespace tdg::train {

using ad::Var;

template <typename T>
StepGraph<T> build_step_graph(const model::Binding<T>& params, const model::Binding<T>& frozen,
                              const TrainConfig& cfg, const Var<T>& images) {
  StepGraph<T> g;
  g.bottom_up = model::forward_bottom_up(params, cfg.model, images);
  if (cfg.losses.l1 || cfg.losses.perceptual) {
    if (cfg.losses.perceptual) {
      auto rec = guidance::reconstruction_loss(frozen, g.bottom_up.reconstruction, images);
      if (cfg.losses.l1) g.l1 = rec.l1;
      g.perceptual = rec.perceptual;
    } else {
      g.l1 = ad::l1_distance(g.bottom_up.reconstruction, images);
    }
  }
  if (cfg.losses.tdg) {
    const Var<T> field = guidance::build_guidance(g.bottom_up.slots, g.bottom_up.masks, cfg.model.stride);
    const Var<T> reencoded = guidance::reencode_reconstruction(params, cfg.model, g.bottom_up.reconstruction);
    g.tdg = guidance::tdg_loss(model::project(params, cfg.model, reencoded), field);
  }
  g.total = guidance::total_loss(g.l1, g.perceptual, g.tdg, static_cast<T>(cfg.lambda_td));
  return g;
}

template StepGraph<float> build_step_graph(const model::Binding<float>&, const model::Binding<float>&,
                                           const TrainConfig&, const Var<float>&);
template StepGraph<double> build_step_graph(const model::Binding<double>&, const model::Binding<double>&,
                                            const TrainConfig&, const Var<double>&);

std::vector<std::int64_t> batch_indices(std::uint64_t seed, std::int64_t step, std::int64_t dataset_size, int batch) {
  if (dataset_size < 1 || batch < 1) throw std::invalid_argument("batch_indices: empty dataset or batch");
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(static_cast<std::uint64_t>(step) >> 32),
                    0x62617463u};
  std::mt19937_64 rng(seq);
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(batch));
  if (batch <= dataset_size) {
    // Partial Fisher-Yates over a sparse permutation.
    std::vector<std::pair<std::int64_t, std::int64_t>> swapped;
    auto lookup = [&](std::int64_t i) {
      for (const auto& [k, v] : swapped) {
        if (k == i) return v;
      }
      return i;
    };
    auto assign = [&](std::int64_t i, std::int64_t v) {
      for (auto& [k, val] : swapped) {
        if (k == i) {
          val = v;
          return;
        }
      }
      swapped.emplace_back(i, v);
    };
    for (int b = 0; b < batch; ++b) {
      const auto span = static_cast<std::uint64_t>(dataset_size - b);
      const std::int64_t j = b + static_cast<std::int64_t>(rng() % span);
      const std::int64_t vj = lookup(j), vb = lookup(b);
      out.push_back(vj);
      assign(j, vb);
      assign(b, vj);
    }
  } else {
    for (int b = 0; b < batch; ++b) {
      out.push_back(static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(dataset_size)));
    }
  }
  return out;
}

Tensor<float> stack_images(std::span<const scenes::SceneSample> data, std::span<const std::int64_t> indices) {
  if (indices.empty()) throw std::invalid_argument("stack_images: no indices");
  const Shape& s = data[static_cast<std::size_t>(indices[0])].image.shape();
  Tensor<float> out(Shape{static_cast<std::int64_t>(indices.size()), s[0], s[1], s[2]});
  const std::int64_t per = shape_numel(s);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& img = data[static_cast<std::size_t>(indices[b])].image;
    if (img.shape() != s) throw ShapeError("stack_images: images differ in shape");
    std::copy(img.data().begin(), img.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  return out;
}

nlohmann::ordered_json to_json(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["l1"] = r.losses.l1;
  j["perceptual"] = r.losses.perceptual;
  j["tdg"] = r.losses.tdg;
  j["total"] = r.losses.total;
  return j;
}

Trainer::Trainer(const TrainConfig& cfg) {
  cfg.validate();
  state_.config = cfg;
  state_.params = model::init_params<float>(cfg.model, cfg.seed);
  state_.frozen = guidance::init_perceptual_params<float>(kPerceptualSeed);
  state_.adam.beta1 = cfg.optimizer.beta1;
  state_.adam.beta2 = cfg.optimizer.beta2;
  state_.adam.epsilon = cfg.optimizer.epsilon;
  state_.adam.lr = cfg.optimizer.lr_at(0);
}

Trainer::Trainer(Checkpoint resume) : state_(std::move(resume)) { state_.config.validate(); }

StepRecord Trainer::step(std::span<const scenes::SceneSample> data) {
  const TrainConfig& cfg = state_.config;
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  const auto idx = batch_indices(cfg.seed, state_.step, static_cast<std::int64_t>(data.size()), cfg.batch_size);
  const Tensor<float> batch = stack_images(data, idx);

  ad::Tape<float> tape;
  const model::Binding<float> params(tape, state_.params, true);
  const model::Binding<float> frozen(tape, state_.frozen, false);
  const Var<float> images = tape.constant(batch);
  const StepGraph<float> g = build_step_graph(params, frozen, cfg, images);

  StepRecord rec;
  rec.step = state_.step;
  auto scalar = [](const Var<float>& v) { return v.valid() ? static_cast<double>(v.value().item()) : 0.0; };
  rec.losses.l1 = scalar(g.l1);
  rec.losses.perceptual = scalar(g.perceptual);
  rec.losses.tdg = scalar(g.tdg);
  rec.losses.lambda_td = cfg.lambda_td;
  rec.losses.total = scalar(g.total);
  if (!std::isfinite(rec.losses.total)) throw NonFiniteLoss(state_.step);

  tape.backward(g.total);
  ParamMap<float> grads = params.grads();
  rec.grad_norm = clip_grad_norm(grads, cfg.optimizer.clip_norm);
  state_.adam.lr = cfg.optimizer.lr_at(state_.step);
  adam_step(state_.params, grads, state_.adam);
  ++state_.step;
  return rec;
}

double Trainer::calibrate(std::span<const scenes::SceneSample> data) {
  Checkpoint probe = state_;
  probe.threshold.reset();
  state_.threshold = resolve_threshold(probe, data);
  return *state_.threshold;
}

Checkpoint train(Trainer& trainer, std::span<const scenes::SceneSample> data, const TrainOptions& options) {
  const TrainConfig& cfg = trainer.config();
  const auto ckpt_path = std::filesystem::path(cfg.checkpoint_dir) / "last.tdgc";
  while (trainer.current_step() < cfg.steps) {
    const StepRecord rec = trainer.step(data);
    if (options.log) *options.log << to_json(rec).dump() << '\n';
    if (options.on_step) options.on_step(rec);
    const std::int64_t done = trainer.current_step();
    const bool at_interval = cfg.eval_interval > 0 && done % cfg.eval_interval == 0;
    if (at_interval && !options.eval_set.empty()) {
      const auto ev = evaluate(trainer.state(), options.eval_set, false);
      if (options.log) {
        auto agg = metrics::report_records(ev.report).back();
        nlohmann::ordered_json j;
        j["step"] = done;
        j["eval"] = agg;
        *options.log << j.dump() << '\n';
      }
    }
    if (options.log) options.log->flush();
    if (options.write_checkpoints && at_interval && done != cfg.steps) save_checkpoint(trainer.state(), ckpt_path);
  }
  trainer.calibrate(data);
  if (options.write_checkpoints) save_checkpoint(trainer.state(), ckpt_path);
  return trainer.state();
}

Checkpoint train(const TrainConfig& cfg, std::span<const scenes::SceneSample> data, const TrainOptions& options) {
  Trainer trainer(cfg);
  return train(trainer, data, options);
}

int evaluation_threads() {
  if (const char* env = std::getenv("TDG_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

// Runs fn(i) for i in [0, n) on up to `threads` workers; results land at their index.
template <typename R, typename Fn>
std::vector<R> ordered_map(std::size_t n, int threads, Fn fn) {
  std::vector<R> out(n);
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, threads)), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) out[i] = fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

}  // namespace

double resolve_threshold(const Checkpoint& ckpt, std::span<const scenes::SceneSample> data) {
  if (ckpt.threshold) return *ckpt.threshold;
  const auto n = std::min<std::size_t>(data.size(), static_cast<std::size_t>(ckpt.config.refine.calibration_size));
  if (n == 0) throw std::invalid_argument("calibration needs at least one image");
  std::vector<Tensor<float>> images;
  for (std::size_t i = 0; i < n; ++i) images.push_back(data[i].image);
  return refine::calibrate_threshold(ckpt.slot_model(), images);
}

Evaluation evaluate(const Checkpoint& ckpt, std::span<const scenes::SceneSample> data, bool use_cd) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  const model::SlotModel model = ckpt.slot_model();
  Evaluation ev;
  refine::RefineConfig rcfg = ckpt.config.refine;
  if (use_cd) {
    ev.threshold = resolve_threshold(ckpt, data);
    rcfg.threshold = std::max(*ev.threshold, refine::RefineConfig::kThresholdFloor);
  }
  struct Result {
    metrics::ImageMetrics metrics;
    refine::RefineTrace trace;
  };
  auto per_image = ordered_map<Result>(data.size(), evaluation_threads(), [&](std::size_t i) {
    const auto& sample = data[i];
    Result r;
    if (use_cd) {
      refine::Refined out = refine::refine(sample.image, model, rcfg);
      r.metrics = metrics::score_image(static_cast<std::int64_t>(i), out.masks, out.reconstruction, sample);
      r.trace = std::move(out.trace);
    } else {
      const model::Perception p = model::perceive(model, sample.image);
      r.metrics = metrics::score_image(static_cast<std::int64_t>(i), p.masks, p.reconstruction, sample);
    }
    return r;
  });
  std::vector<metrics::ImageMetrics> scores;
  for (auto& r : per_image) {
    scores.push_back(r.metrics);
    if (use_cd) ev.traces.push_back(std::move(r.trace));
  }
  ev.report = metrics::aggregate(std::move(scores));
  return ev;
}

int background_slot(const model::MaskStack& masks) {
  const metrics::LabelMap labels = metrics::argmax_labels(masks);
  std::vector<std::int64_t> counts(static_cast<std::size_t>(masks.masks.dim(0)), 0);
  const std::int64_t h = labels.height, w = labels.width;
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      if (y == 0 || y == h - 1 || x == 0 || x == w - 1) ++counts[static_cast<std::size_t>(labels.at(y, x))];
    }
  }
  return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

RecoveryReport corrupt_and_recover(const Checkpoint& ckpt, std::span<const scenes::SceneSample> data) {
  if (data.empty()) throw std::invalid_argument("corrupt_and_recover: empty dataset");
  const model::SlotModel model = ckpt.slot_model();
  RecoveryReport rep;
  rep.threshold = std::max(resolve_threshold(ckpt, data), refine::RefineConfig::kThresholdFloor);
  refine::RefineConfig rcfg = ckpt.config.refine;
  rcfg.threshold = rep.threshold;

  rep.images = ordered_map<RecoveryImage>(data.size(), evaluation_threads(), [&](std::size_t i) {
    const auto& sample = data[i];
    const model::Perception p = model::perceive(model, sample.image);
    RecoveryImage r;
    r.index = static_cast<std::int64_t>(i);
    r.background_slot = background_slot(p.masks);
    const auto row = p.slots.row(r.background_slot);
    const model::SlotSet start{Tensor<double>(Shape{1, p.slots.dim()}, row), true};
    refine::Refined out = refine::refine_from(model, p, start, rcfg, false);
    r.final_masks = out.masks;
    r.trace = std::move(out.trace);
    for (std::size_t t = 1; t < r.trace.max_conflict.size(); ++t) {
      if (r.trace.max_conflict[t] > r.trace.max_conflict[t - 1]) r.monotone = false;
    }
    const metrics::IouTable table =
        metrics::iou_table(metrics::argmax_labels(r.final_masks), sample.labels, false);
    r.objects = static_cast<int>(table.gt_ids.size());
    for (const auto& ious : table.iou) {
      if (!ious.empty() && *std::max_element(ious.begin(), ious.end()) >= 0.5) ++r.recovered;
    }
    return r;
  });

  double sum = 0.0;
  int scored = 0;
  for (const auto& r : rep.images) {
    rep.all_monotone = rep.all_monotone && r.monotone;
    if (r.objects == 0) continue;
    sum += static_cast<double>(r.recovered) / static_cast<double>(r.objects);
    ++scored;
  }
  rep.mean_recovery = scored > 0 ? sum / scored : 0.0;
  return rep;
}

std::vector<nlohmann::ordered_json> recovery_records(const RecoveryReport& report) {
  std::vector<nlohmann::ordered_json> out;
  for (const auto& r : report.images) {
    nlohmann::ordered_json j;
    j["kind"] = "image";
    j["index"] = r.index;
    j["objects"] = r.objects;
    j["recovered"] = r.recovered;
    j["background_slot"] = r.background_slot;
    j["added"] = r.trace.additions.size();
    j["hit_cap"] = r.trace.hit_cap;
    j["monotone"] = r.monotone;
    j["max_conflict"] = r.trace.max_conflict;
    out.push_back(std::move(j));
  }
  nlohmann::ordered_json agg;
  agg["kind"] = "aggregate";
  agg["images"] = report.images.size();
  agg["threshold"] = report.threshold;
  agg["mean_recovery"] = report.mean_recovery;
  agg["all_monotone"] = report.all_monotone;
  out.push_back(std::move(agg));
  return out;
}

}  // namespace tdg::train
