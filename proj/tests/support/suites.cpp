#include "suites.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <set>

#include <unistd.h>

#include "oracles.hpp"
#include "tdg/checkpoint.hpp"
#include "tdg/guidance.hpp"
#include "tdg/metrics.hpp"
#include "tdg/ops.hpp"
#include "tdg/refine.hpp"
#include "tdg/scenes.hpp"
#include "tdg/trainer.hpp"

namespace tdg::suites {

namespace {

namespace fs = std::filesystem;
using ad::Tape;
using ad::Var;
using oracle::Rng;
using Vars = std::vector<Var<double>>;
using Inputs = std::vector<Tensor<double>>;

std::string fmt(const char* f, ...) {
  char buf[256];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

double fd_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

// Max error over every coordinate of every input of sum(w * fn(inputs)).
double primitive_error(const Inputs& inputs, const std::function<Var<double>(const Vars&)>& fn, Rng& rng, double h) {
  Tensor<double> weights;
  {
    Tape<double> tape;
    Vars v;
    for (const auto& t : inputs) v.push_back(tape.constant(t));
    weights = oracle::uniform(fn(v).shape(), rng, -1.0, 1.0);
  }
  auto run = [&](const Inputs& x, std::vector<Tensor<double>>* grads) {
    Tape<double> tape;
    Vars v;
    for (const auto& t : x) v.push_back(tape.leaf(t, grads != nullptr));
    const Var<double> loss = ad::sum_all(ad::mul(fn(v), tape.constant(weights)));
    if (grads) {
      tape.backward(loss);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const auto* g = v[i].grad();
        grads->push_back(g ? *g : Tensor<double>(x[i].shape(), 0.0));
      }
    }
    return loss.value().item();
  };
  std::vector<Tensor<double>> analytic;
  run(inputs, &analytic);
  double worst = 0.0;
  Inputs probe = inputs;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    for (std::int64_t j = 0; j < probe[i].numel(); ++j) {
      const double orig = probe[i][j];
      probe[i][j] = orig + h;
      const double fp = run(probe, nullptr);
      probe[i][j] = orig - h;
      const double fm = run(probe, nullptr);
      probe[i][j] = orig;
      const double e = fd_error(analytic[i][j], (fp - fm) / (2.0 * h));
      worst = std::max(worst, std::isfinite(e) ? e : 1e300);
    }
  }
  return worst;
}

using ParamLoss = std::function<double(const ParamMap<double>&, ParamMap<double>*)>;

// `analytic` holds the tape gradient; `loss` is differenced numerically.
double param_error(const ParamMap<double>& params, const ParamMap<double>& analytic,
                   const std::vector<std::string>& names, const ParamLoss& loss, double h) {
  ParamMap<double> probe = params;
  double worst = 0.0;
  for (const auto& name : names) {
    Tensor<double>& t = probe.at(name);
    for (std::int64_t j = 0; j < t.numel(); ++j) {
      const double orig = t[j];
      t[j] = orig + h;
      const double fp = loss(probe, nullptr);
      t[j] = orig - h;
      const double fm = loss(probe, nullptr);
      t[j] = orig;
      const double e = fd_error(analytic.at(name)[j], (fp - fm) / (2.0 * h));
      worst = std::max(worst, std::isfinite(e) ? e : 1e300);
    }
  }
  return worst;
}

// Values spaced at least `gap` apart in shuffled order, so min/max have a unique winner.
Tensor<double> spaced(const Shape& shape, Rng& rng, double gap) {
  Tensor<double> t(shape);
  std::vector<double> v(static_cast<std::size_t>(t.numel()));
  std::iota(v.begin(), v.end(), 0.0);
  std::shuffle(v.begin(), v.end(), rng);
  std::uniform_real_distribution<double> jitter(0.0, 0.1 * gap);
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = v[i] * gap - 1.0 + jitter(rng);
  return t;
}

struct PrimitiveCase {
  std::string name;
  std::function<Inputs(Rng&)> inputs;
  std::function<Var<double>(const Vars&)> fn;
};

std::vector<PrimitiveCase> primitive_cases() {
  using oracle::signed_uniform;
  using oracle::uniform;
  std::vector<PrimitiveCase> c;
  c.push_back({"conv2d", [](Rng& r) { return Inputs{uniform({2, 3, 5, 5}, r), uniform({4, 3, 3, 3}, r), uniform({4}, r)}; },
               [](const Vars& v) { return ad::conv2d(v[0], v[1], v[2], 1, 1); }});
  c.push_back({"conv2d_strided", [](Rng& r) { return Inputs{uniform({1, 2, 6, 6}, r), uniform({3, 2, 3, 3}, r)}; },
               [](const Vars& v) { return ad::conv2d(v[0], v[1], 2, 0); }});
  c.push_back({"upsample_nearest", [](Rng& r) { return Inputs{uniform({1, 2, 3, 3}, r)}; },
               [](const Vars& v) { return ad::upsample_nearest(v[0], 2); }});
  c.push_back({"avg_pool", [](Rng& r) { return Inputs{uniform({1, 2, 4, 4}, r)}; },
               [](const Vars& v) { return ad::avg_pool(v[0], 2); }});
  c.push_back({"matmul", [](Rng& r) { return Inputs{uniform({2, 3, 4}, r), uniform({4, 5}, r)}; },
               [](const Vars& v) { return ad::matmul(v[0], v[1]); }});
  c.push_back({"matmul_batched", [](Rng& r) { return Inputs{uniform({2, 3, 4}, r), uniform({2, 4, 2}, r)}; },
               [](const Vars& v) { return ad::matmul(v[0], v[1]); }});
  c.push_back({"softmax", [](Rng& r) { return Inputs{uniform({3, 4}, r, -2, 2)}; },
               [](const Vars& v) { return ad::softmax(v[0], 1); }});
  c.push_back({"softmax_axis0", [](Rng& r) { return Inputs{uniform({3, 4}, r, -2, 2)}; },
               [](const Vars& v) { return ad::softmax(v[0], 0); }});
  c.push_back({"layer_norm", [](Rng& r) { return Inputs{uniform({3, 5}, r)}; },
               [](const Vars& v) { return ad::layer_norm(v[0]); }});
  c.push_back({"relu", [](Rng& r) { return Inputs{signed_uniform({3, 4}, r, 0.1, 1.0)}; },
               [](const Vars& v) { return ad::relu(v[0]); }});
  c.push_back({"sigmoid", [](Rng& r) { return Inputs{uniform({3, 4}, r, -3, 3)}; },
               [](const Vars& v) { return ad::sigmoid(v[0]); }});
  c.push_back({"tanh", [](Rng& r) { return Inputs{uniform({3, 4}, r, -2, 2)}; },
               [](const Vars& v) { return ad::tanh(v[0]); }});
  c.push_back({"gru_cell",
               [](Rng& r) {
                 Inputs in{uniform({2, 3}, r), uniform({2, 4}, r)};
                 for (int i = 0; i < 3; ++i) in.push_back(uniform({3, 4}, r));
                 for (int i = 0; i < 3; ++i) in.push_back(uniform({4, 4}, r));
                 for (int i = 0; i < 6; ++i) in.push_back(uniform({4}, r));
                 return in;
               },
               [](const Vars& v) {
                 ad::GruWeights<double> w{v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10], v[11], v[12], v[13]};
                 return ad::gru_cell(v[0], v[1], w);
               }});
  c.push_back({"add", [](Rng& r) { return Inputs{uniform({2, 3}, r), uniform({3}, r)}; },
               [](const Vars& v) { return ad::add(v[0], v[1]); }});
  c.push_back({"sub", [](Rng& r) { return Inputs{uniform({2, 3}, r), uniform({2, 1}, r)}; },
               [](const Vars& v) { return ad::sub(v[0], v[1]); }});
  c.push_back({"mul", [](Rng& r) { return Inputs{uniform({2, 3}, r), uniform({1, 3}, r)}; },
               [](const Vars& v) { return ad::mul(v[0], v[1]); }});
  c.push_back({"div", [](Rng& r) { return Inputs{uniform({2, 3}, r), signed_uniform({2, 3}, r, 0.5, 2.0)}; },
               [](const Vars& v) { return ad::div(v[0], v[1]); }});
  c.push_back({"add_scalar", [](Rng& r) { return Inputs{uniform({4}, r)}; },
               [](const Vars& v) { return ad::add_scalar(v[0], 0.7); }});
  c.push_back({"mul_scalar", [](Rng& r) { return Inputs{uniform({4}, r)}; },
               [](const Vars& v) { return ad::mul_scalar(v[0], -1.3); }});
  c.push_back({"l1_distance",
               [](Rng& r) {
                 const auto a = uniform({3, 4}, r);
                 auto b = signed_uniform({3, 4}, r, 0.1, 1.0);
                 for (std::int64_t i = 0; i < b.numel(); ++i) b[i] += a[i];
                 return Inputs{a, b};
               },
               [](const Vars& v) { return ad::l1_distance(v[0], v[1]); }});
  c.push_back({"squared_distance", [](Rng& r) { return Inputs{uniform({3, 4}, r), uniform({3, 4}, r)}; },
               [](const Vars& v) { return ad::squared_distance(v[0], v[1]); }});
  c.push_back({"cosine_similarity", [](Rng& r) { return Inputs{uniform({3, 4}, r), uniform({3, 4}, r)}; },
               [](const Vars& v) { return ad::cosine_similarity(v[0], v[1], 1); }});
  c.push_back({"l2_normalize", [](Rng& r) { return Inputs{uniform({3, 4}, r)}; },
               [](const Vars& v) { return ad::l2_normalize(v[0], 1); }});
  c.push_back({"broadcast_to", [](Rng& r) { return Inputs{uniform({1, 3}, r)}; },
               [](const Vars& v) { return ad::broadcast_to(v[0], Shape{4, 3}); }});
  c.push_back({"reshape", [](Rng& r) { return Inputs{uniform({2, 6}, r)}; },
               [](const Vars& v) { return ad::reshape(v[0], Shape{3, 4}); }});
  c.push_back({"permute", [](Rng& r) { return Inputs{uniform({2, 3, 4}, r)}; },
               [](const Vars& v) { return ad::permute(v[0], {2, 0, 1}); }});
  c.push_back({"slice", [](Rng& r) { return Inputs{uniform({2, 5}, r)}; },
               [](const Vars& v) { return ad::slice(v[0], 1, 1, 3); }});
  c.push_back({"sum", [](Rng& r) { return Inputs{uniform({2, 3, 4}, r)}; },
               [](const Vars& v) { return ad::sum(v[0], 1); }});
  c.push_back({"mean", [](Rng& r) { return Inputs{uniform({2, 3, 4}, r)}; },
               [](const Vars& v) { return ad::mean(v[0], 2, true); }});
  c.push_back({"min", [](Rng& r) { return Inputs{spaced({3, 4}, r, 0.1)}; },
               [](const Vars& v) { return ad::min(v[0], 1); }});
  c.push_back({"max", [](Rng& r) { return Inputs{spaced({3, 4}, r, 0.1)}; },
               [](const Vars& v) { return ad::max(v[0], 0, true); }});
  c.push_back({"sum_all", [](Rng& r) { return Inputs{uniform({3, 4}, r)}; },
               [](const Vars& v) { return ad::sum_all(v[0]); }});
  c.push_back({"mean_all", [](Rng& r) { return Inputs{uniform({3, 4}, r)}; },
               [](const Vars& v) { return ad::mean_all(v[0]); }});
  return c;
}

train::TrainConfig tiny_train_config() {
  train::TrainConfig cfg;
  cfg.model = tiny_model();
  cfg.lambda_td = 0.5;
  return cfg;
}

std::vector<scenes::SceneSample> small_scenes(const train::TrainConfig& cfg, std::int64_t n) {
  return scenes::generate_dataset(cfg.scenes, n);
}

model::SlotModel random_model(const model::ModelConfig& cfg, std::uint64_t seed) {
  return {cfg, model::init_params<float>(cfg, seed), guidance::init_perceptual_params<float>(train::kPerceptualSeed)};
}

model::SlotSet random_slots(std::int64_t k, std::int64_t c, Rng& rng) {
  return model::normalize_slots({oracle::uniform({k, c}, rng), false});
}

// Unit vectors scattered around a few random centers so that some pairs are close.
model::SlotSet clustered_slots(std::int64_t k, std::int64_t c, Rng& rng, double spread) {
  std::uniform_int_distribution<int> pick(0, 2);
  const auto centers = oracle::uniform({3, c}, rng);
  const auto noise = oracle::uniform({k, c}, rng, -spread, spread);
  Tensor<double> s(Shape{k, c});
  for (std::int64_t i = 0; i < k; ++i) {
    const int m = pick(rng);
    for (std::int64_t j = 0; j < c; ++j) s[i * c + j] = centers[m * c + j] + noise[i * c + j];
  }
  return model::normalize_slots({s, false});
}

// Smallest distance from g to the convex hull of the rows of s, by active-set enumeration.
double hull_residual(const Tensor<double>& s, const std::vector<double>& g) {
  const int k = static_cast<int>(s.dim(0)), c = static_cast<int>(s.dim(1));
  const Eigen::Map<const Eigen::VectorXd> target(g.data(), c);
  double best = std::numeric_limits<double>::infinity();
  for (int mask = 1; mask < (1 << k); ++mask) {
    std::vector<int> idx;
    for (int i = 0; i < k; ++i) {
      if (mask & (1 << i)) idx.push_back(i);
    }
    const int m = static_cast<int>(idx.size());
    Eigen::MatrixXd a(c, m);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < c; ++j) a(j, i) = s[idx[i] * c + j];
    }
    Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(m + 1, m + 1);
    kkt.topLeftCorner(m, m) = 2.0 * a.transpose() * a;
    kkt.block(0, m, m, 1).setOnes();
    kkt.block(m, 0, 1, m).setOnes();
    Eigen::VectorXd rhs(m + 1);
    rhs.head(m) = 2.0 * a.transpose() * target;
    rhs(m) = 1.0;
    const Eigen::VectorXd sol = kkt.completeOrthogonalDecomposition().solve(rhs);
    const Eigen::VectorXd w = sol.head(m);
    if (w.minCoeff() < -1e-12 || std::abs(w.sum() - 1.0) > 1e-9) continue;
    best = std::min(best, (a * w - target).norm());
  }
  return best;
}

double max_value(const Tensor<double>& t) { return *std::max_element(t.data().begin(), t.data().end()); }

double mask_sum_error(const model::MaskStack& m) {
  const std::int64_t k = m.masks.dim(0), plane = m.masks.dim(1) * m.masks.dim(2);
  double worst = 0.0;
  for (std::int64_t p = 0; p < plane; ++p) {
    double s = 0.0;
    for (std::int64_t i = 0; i < k; ++i) s += m.masks[i * plane + p];
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

double norm_error(const model::SlotSet& s) {
  double worst = 0.0;
  for (std::int64_t k = 0; k < s.count(); ++k) {
    double ss = 0.0;
    for (double v : s.row(k)) ss += v * v;
    worst = std::max(worst, std::abs(std::sqrt(ss) - 1.0));
  }
  return worst;
}

scenes::LabelMap random_labels(std::int64_t h, std::int64_t w, int ids, Rng& rng) {
  std::uniform_int_distribution<int> d(0, ids - 1);
  scenes::LabelMap m{h, w, {}};
  for (std::int64_t i = 0; i < h * w; ++i) m.ids.push_back(d(rng));
  return m;
}

}  // namespace

model::ModelConfig tiny_model() {
  model::ModelConfig m;
  m.image_height = 8;
  m.image_width = 8;
  m.feature_channels = 4;
  m.slot_dim = 4;
  m.num_slots = 3;
  m.slot_iters = 2;
  m.projection_hidden = 6;
  m.decoder_channels = {4, 4, 4};
  return m;
}

train::TrainConfig small_train_config() {
  train::TrainConfig cfg;
  cfg.model.image_height = 16;
  cfg.model.image_width = 16;
  cfg.model.feature_channels = 8;
  cfg.model.slot_dim = 8;
  cfg.model.num_slots = 4;
  cfg.model.slot_iters = 2;
  cfg.model.projection_hidden = 16;
  cfg.model.decoder_channels = {8, 8, 8};
  cfg.scenes.height = 16;
  cfg.scenes.width = 16;
  cfg.scenes.min_objects = 1;
  cfg.scenes.max_objects = 3;
  cfg.scenes.min_size = 4;
  cfg.scenes.max_size = 8;
  cfg.batch_size = 4;
  cfg.steps = 6;
  cfg.eval_interval = 3;
  cfg.eval_images = 0;
  cfg.dataset_size = 16;
  cfg.seed = 11;
  cfg.refine.max_added_slots = 8;
  cfg.refine.calibration_size = 8;
  return cfg;
}

std::vector<Check> gradient_suite() {
  std::vector<Check> out;
  for (const auto& pc : primitive_cases()) {
    double worst = 0.0;
    for (int seed = 0; seed < kSeeds; ++seed) {
      Rng rng(1000 + seed);
      worst = std::max(worst, primitive_error(pc.inputs(rng), pc.fn, rng, 1e-6));
    }
    out.push_back({"grad." + pc.name, worst < kGradTolerance, fmt("max rel err %.3g", worst)});
  }

  {
    bool zero = true;
    for (int seed = 0; seed < kSeeds; ++seed) {
      Rng rng(2000 + seed);
      Tape<double> tape;
      const auto x = tape.leaf(oracle::uniform({3, 4}, rng), true);
      const auto loss = ad::sum_all(ad::add(ad::mul(ad::stop_gradient(x), x), ad::stop_gradient(ad::tanh(x))));
      tape.backward(loss);
      // d/dx of sg(x) * x is sg(x) = x itself; the stop-gradient branches add nothing.
      for (std::int64_t i = 0; i < 12; ++i) zero = zero && x.grad()->data()[i] == x.value()[i];
    }
    out.push_back({"grad.stop_gradient", zero, zero ? "blocked" : "gradient leaked"});
  }

  // Reconstruction loss (L1 + perceptual) with respect to the reconstruction.
  {
    double worst = 0.0;
    for (int seed = 0; seed < kSeeds; ++seed) {
      Rng rng(3000 + seed);
      const auto frozen = guidance::init_perceptual_params<double>(seed);
      const auto images = oracle::uniform({2, 3, 8, 8}, rng, 0.0, 1.0);
      auto recon = oracle::signed_uniform({2, 3, 8, 8}, rng, 0.05, 0.3);
      for (std::int64_t i = 0; i < recon.numel(); ++i) recon[i] += images[i];
      auto fn = [&](const Vars& v) {
        const model::Binding<double> fb(v[0].tape(), frozen, false);
        const auto rec = guidance::reconstruction_loss(fb, v[0], v[0].tape().constant(images));
        return ad::add(rec.l1, rec.perceptual);
      };
      worst = std::max(worst, primitive_error({recon}, fn, rng, 1e-6));
    }
    out.push_back({"grad.reconstruction_loss", worst < kGradTolerance, fmt("max rel err %.3g", worst)});
  }

  // Guidance loss with respect to the projected features.
  {
    double worst = 0.0;
    for (int seed = 0; seed < kSeeds; ++seed) {
      Rng rng(4000 + seed);
      const auto field = oracle::uniform({2, 4, 2, 2}, rng);
      auto fn = [&](const Vars& v) { return guidance::tdg_loss(v[0], v[0].tape().constant(field)); };
      worst = std::max(worst, primitive_error({oracle::uniform({2, 4, 2, 2}, rng)}, fn, rng, 1e-6));
    }
    out.push_back({"grad.tdg_loss", worst < kGradTolerance, fmt("max rel err %.3g", worst)});
  }

  // Bi-level initialization: only the final iteration is differentiated, and its input
  // moves one-for-one with the learned queries.
  {
    model::ModelConfig cfg = tiny_model();
    cfg.slot_iters = 3;
    const std::vector<std::string> names = {"backbone.conv2.bias", "encoder.to_k.weight", "encoder.to_v.weight",
                                            "encoder.queries", "encoder.gru.w_hz", "encoder.ff2.bias"};
    double worst = 0.0;
    for (int seed = 0; seed < kSeeds; ++seed) {
      Rng rng(6000 + seed);
      const auto params = model::init_params<double>(cfg, seed);
      const auto images = oracle::uniform({2, 3, 8, 8}, rng, 0.0, 1.0);
      const auto probe = oracle::uniform({2, cfg.num_slots, cfg.slot_dim}, rng);
      ParamMap<double> analytic;
      Tensor<double> penultimate, init0;
      {
        Tape<double> tape;
        const model::Binding<double> pb(tape, params, true);
        const auto feats = model::encode_backbone(pb, cfg, tape.constant(images));
        const auto init = model::initial_slots(pb, cfg, 2);
        init0 = init.value();
        penultimate = model::slot_attention(pb, cfg, feats, init, cfg.slot_iters - 1).slots.value();
        const auto sa = model::slot_attention(pb, cfg, feats, init, cfg.slot_iters);
        tape.backward(ad::sum_all(ad::mul(sa.slots, tape.constant(probe))));
        analytic = pb.grads();
      }
      ParamLoss loss = [&](const ParamMap<double>& p, ParamMap<double>*) {
        Tape<double> tape;
        const model::Binding<double> pb(tape, p, false);
        const auto feats = model::encode_backbone(pb, cfg, tape.constant(images));
        const auto shift = ad::sub(model::initial_slots(pb, cfg, 2), tape.constant(init0));
        const auto start = ad::add(tape.constant(penultimate), shift);
        const auto sa = model::slot_attention(pb, cfg, feats, start, 1);
        return ad::sum_all(ad::mul(sa.slots, tape.constant(probe))).value().item();
      };
      worst = std::max(worst, param_error(params, analytic, names, loss, 1e-6));
    }
    out.push_back({"grad.bilevel_init", worst < kGradTolerance, fmt("max rel err %.3g", worst)});
  }

  // Full weighted objective through the model, checked on one tensor per module.
  {
    train::TrainConfig cfg = tiny_train_config();
    // Exact gradients everywhere; the bi-level estimator is checked above.
    cfg.model.bilevel_init = false;
    const std::vector<std::string> names = {"backbone.conv1.bias",    "backbone.conv4.bias", "encoder.to_q.weight",
                                            "encoder.gru.b_hn",       "decoder.pos.weight",  "decoder.conv4.bias",
                                            "projection.conv2.weight"};
    double worst = 0.0;
    for (int seed = 0; seed < kSeeds; ++seed) {
      Rng rng(5000 + seed);
      const auto params = model::init_params<double>(cfg.model, seed);
      const auto frozen = guidance::init_perceptual_params<double>(seed);
      const auto images = oracle::uniform({2, 3, 8, 8}, rng, 0.0, 1.0);
      // Tape gradient of the library's training objective.
      ParamMap<double> analytic;
      Tensor<double> recon0, field0;
      {
        Tape<double> tape;
        const model::Binding<double> pb(tape, params, true);
        const model::Binding<double> fb(tape, frozen, false);
        const auto g = train::build_step_graph(pb, fb, cfg, tape.constant(images));
        recon0 = g.bottom_up.reconstruction.value();
        field0 = guidance::build_guidance(g.bottom_up.slots, g.bottom_up.masks, cfg.model.stride).value();
        tape.backward(g.total);
        analytic = pb.grads();
      }
      // The same objective with the stop-gradient inputs (reconstruction fed back to the
      // backbone, guidance field) frozen at their base values, so differencing sees only
      // the paths the gradient is meant to follow.
      ParamLoss loss = [&](const ParamMap<double>& p, ParamMap<double>*) {
        Tape<double> tape;
        const model::Binding<double> pb(tape, p, false);
        const model::Binding<double> fb(tape, frozen, false);
        const auto img = tape.constant(images);
        const auto bu = model::forward_bottom_up(pb, cfg.model, img);
        const auto rec = guidance::reconstruction_loss(fb, bu.reconstruction, img);
        const auto reenc = guidance::reencode_reconstruction(pb, cfg.model, tape.constant(recon0));
        const auto td = guidance::tdg_loss(model::project(pb, cfg.model, reenc), tape.constant(field0));
        return guidance::total_loss(rec.l1, rec.perceptual, td, cfg.lambda_td).value().item();
      };
      worst = std::max(worst, param_error(params, analytic, names, loss, 1e-6));
    }
    out.push_back({"grad.total_loss", worst < kGradTolerance, fmt("max rel err %.3g", worst)});
  }
  return out;
}

std::vector<Check> isolation_suite() {
  std::vector<Check> out;
  train::TrainConfig cfg = small_train_config();
  const auto data = small_scenes(cfg, cfg.dataset_size);
  const std::vector<std::int64_t> idx = {0, 1, 2, 3};
  const Tensor<float> images = train::stack_images(data, idx);

  // Gradient of the guidance term alone through the training graph.
  {
    const auto params = model::init_params<float>(cfg.model, cfg.seed);
    const auto frozen = guidance::init_perceptual_params<float>(train::kPerceptualSeed);
    Tape<float> tape;
    const model::Binding<float> pb(tape, params, true);
    const model::Binding<float> fb(tape, frozen, false);
    const auto g = train::build_step_graph(pb, fb, cfg, tape.constant(images));
    tape.backward(g.tdg);
    const auto grads = pb.grads();
    double blocked = 0.0, weakest = std::numeric_limits<double>::infinity();
    std::string weakest_name;
    for (const auto& [name, t] : grads) {
      double m = 0.0;
      for (float v : t.data()) m = std::max(m, static_cast<double>(std::abs(v)));
      const std::string group = model::param_group(name);
      if (group == "encoder" || group == "decoder") {
        blocked = std::max(blocked, m);
      } else if (m < weakest) {
        weakest = m;
        weakest_name = name;
      }
    }
    out.push_back({"isolation.encoder_decoder_zero", blocked == 0.0, fmt("max |grad| %.3g", blocked)});
    out.push_back({"isolation.backbone_projection_nonzero", weakest >= 1e-8,
                   fmt("smallest max |grad| %.3g (%s)", weakest, weakest_name.c_str())});
  }

  // A real optimizer step driven only by the guidance term leaves encoder and decoder untouched.
  {
    train::TrainConfig only = cfg;
    only.losses = {false, false, true};
    train::Trainer tr(only);
    const auto before = tr.state().params;
    tr.step(data);
    tr.step(data);
    bool frozen_ok = true, moved_ok = true;
    for (const auto& [name, t] : tr.state().params) {
      const std::string group = model::param_group(name);
      const bool same = t == before.at(name);
      if (group == "encoder" || group == "decoder") frozen_ok = frozen_ok && same;
      else moved_ok = moved_ok && !same;
    }
    out.push_back({"isolation.trainer_step_encoder_decoder_unchanged", frozen_ok, frozen_ok ? "bit-identical" : "changed"});
    out.push_back({"isolation.trainer_step_backbone_projection_updated", moved_ok, moved_ok ? "updated" : "stalled"});
  }

  // Rows without the guidance term never touch the projection network.
  {
    train::TrainConfig base = cfg;
    base.losses = {true, true, false};
    base.lambda_td = 3.0;
    bool zero = true;
    {
      const auto params = model::init_params<float>(base.model, base.seed);
      const auto frozen = guidance::init_perceptual_params<float>(train::kPerceptualSeed);
      Tape<float> tape;
      const model::Binding<float> pb(tape, params, true);
      const model::Binding<float> fb(tape, frozen, false);
      const auto g = train::build_step_graph(pb, fb, base, tape.constant(images));
      tape.backward(g.total);
      for (const auto& [name, t] : pb.grads()) {
        if (model::param_group(name) != "projection") continue;
        for (float v : t.data()) zero = zero && v == 0.0f;
      }
    }
    train::Trainer tr(base);
    const auto before = tr.state().params;
    for (int i = 0; i < 3; ++i) tr.step(data);
    bool unchanged = true;
    for (const auto& [name, t] : tr.state().params) {
      if (model::param_group(name) == "projection") unchanged = unchanged && t == before.at(name);
    }
    out.push_back({"isolation.baseline_projection_zero_grad", zero && unchanged,
                   fmt("grad zero=%d params unchanged=%d", zero, unchanged)});
  }
  return out;
}

std::vector<Check> invariant_suite() {
  std::vector<Check> out;
  const train::TrainConfig cfg = small_train_config();
  const auto data = small_scenes(cfg, 6);

  double mask_err = 0.0, norm_err = 0.0, attn_err = 0.0, hull = 0.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto m = random_model(cfg.model, seed);
    for (const auto& s : data) {
      const auto p = model::perceive(m, s.image);
      mask_err = std::max(mask_err, mask_sum_error(p.masks));
      norm_err = std::max(norm_err, norm_error(p.slots));
      const std::int64_t k = p.attention.dim(0), len = p.attention.dim(1);
      for (std::int64_t l = 0; l < len; ++l) {
        double sum = 0.0;
        for (std::int64_t i = 0; i < k; ++i) sum += p.attention[i * len + l];
        attn_err = std::max(attn_err, std::abs(sum - 1.0));
      }
      const auto field = guidance::guidance_field(p.slots, p.masks, cfg.model.stride);
      const std::int64_t cs = field.dim(0), locs = field.dim(1) * field.dim(2);
      for (std::int64_t l = 0; l < locs; ++l) {
        std::vector<double> g(static_cast<std::size_t>(cs));
        for (std::int64_t c = 0; c < cs; ++c) g[c] = field[c * locs + l];
        hull = std::max(hull, hull_residual(p.slots.slots, g));
      }
      for (std::int64_t kk : {1, 2, 7}) {
        Rng rng(seed * 31 + kk);
        const auto [recon, masks] = model::decode(m, random_slots(kk, cfg.model.slot_dim, rng));
        mask_err = std::max(mask_err, mask_sum_error(masks));
      }
      refine::RefineConfig rc = cfg.refine;
      rc.threshold = 0.1;
      norm_err = std::max(norm_err, norm_error(refine::refine(s.image, m, rc).slots));
    }
  }
  out.push_back({"invariant.mask_sum", mask_err <= kMaskSumTolerance, fmt("max |sum-1| %.3g", mask_err)});
  out.push_back({"invariant.slot_unit_norm", norm_err <= kUnitNormTolerance, fmt("max |norm-1| %.3g", norm_err)});

  double soft_err = 0.0;
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(6000 + seed);
    Tape<double> tape;
    const auto x = tape.constant(oracle::uniform({3, 5, 4}, rng, -30.0, 30.0));
    for (int axis = 0; axis < 3; ++axis) {
      const auto s = ad::sum(ad::softmax(x, axis), axis).value();
      for (double v : s.data()) soft_err = std::max(soft_err, std::abs(v - 1.0));
    }
  }
  out.push_back({"invariant.softmax_attention_normalized", std::max(soft_err, attn_err) <= kMaskSumTolerance,
                 fmt("softmax %.3g attention %.3g", soft_err, attn_err)});

  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(7000 + seed);
    for (std::int64_t k = 2; k <= 4; ++k) {
      const auto slots = random_slots(k, 5, rng);
      Tape<double> tape;
      const auto logits = tape.constant(oracle::uniform({k, 8, 8}, rng, -3.0, 3.0));
      const model::MaskStack masks{ad::softmax(logits, 0).value()};
      const auto field = guidance::guidance_field(slots, masks, 4);
      for (std::int64_t l = 0; l < 4; ++l) {
        std::vector<double> g(5);
        for (std::int64_t c = 0; c < 5; ++c) g[c] = field[c * 4 + l];
        hull = std::max(hull, hull_residual(slots.slots, g));
      }
    }
  }
  out.push_back({"invariant.guidance_convex_hull", hull <= kHullResidual, fmt("max residual %.3g", hull)});

  double idem = 0.0;
  bool idem_count = true;
  for (int seed = 0; seed < 50; ++seed) {
    Rng rng(8000 + seed);
    std::uniform_int_distribution<int> kd(2, 9);
    std::uniform_real_distribution<double> td(0.05, 0.6);
    const auto slots = clustered_slots(kd(rng), 6, rng, 0.4);
    const double th = td(rng);
    const auto once = refine::merge_slots(slots, th);
    const auto twice = refine::merge_slots(once.slots, th);
    idem_count = idem_count && twice.slots.count() == once.slots.count();
    if (!idem_count) break;
    for (std::int64_t i = 0; i < once.slots.slots.numel(); ++i) {
      idem = std::max(idem, std::abs(once.slots.slots[i] - twice.slots.slots[i]));
    }
  }
  out.push_back({"invariant.merge_idempotent", idem_count && idem <= 1e-12,
                 fmt("same count=%d max diff %.3g", idem_count, idem)});

  double excess = -1.0;
  bool capped = false;
  for (int seed = 0; seed < 50; ++seed) {
    Rng rng(9000 + seed);
    std::uniform_int_distribution<int> kd(1, 4);
    std::uniform_real_distribution<double> td(0.05, 0.6);
    const auto projected = oracle::uniform({4, 4, 4}, rng);
    refine::RefineConfig rc;
    rc.threshold = td(rng);
    rc.max_added_slots = 16;
    const auto [slots, trace] = refine::add_conflicting_slots(random_slots(kd(rng), 4, rng), projected, rc);
    capped = capped || trace.hit_cap;
    excess = std::max(excess, max_value(refine::conflict_map(projected, slots).values) - rc.threshold);
  }
  for (const auto& s : data) {
    const auto m = random_model(cfg.model, 5);
    const auto p = model::perceive(m, s.image);
    const auto projected = model::project_features(m, p.features);
    refine::RefineConfig rc;
    rc.threshold = 0.05;
    rc.max_added_slots = 16;
    const auto [slots, trace] = refine::add_conflicting_slots(p.slots, projected, rc);
    capped = capped || trace.hit_cap;
    excess = std::max(excess, max_value(refine::conflict_map(projected, slots).values) - rc.threshold);
  }
  out.push_back({"invariant.post_add_conflict_below_threshold", !capped && excess <= 0.0,
                 fmt("max conflict - th %.3g, cap hit=%d", excess, capped)});
  return out;
}

std::vector<Check> oracle_suite() {
  std::vector<Check> out;

  {
    int bad = 0, cases = 0;
    for (int t = 0; t < 400; ++t) {
      Rng rng(10000 + t);
      std::uniform_int_distribution<int> nd(2, 12), kd(1, 4);
      const int n = nd(rng), ka = kd(rng), kb = kd(rng);
      const auto a = random_labels(1, n, ka, rng), b = random_labels(1, n, kb, rng);
      ++cases;
      if (metrics::adjusted_rand_index(a.ids, b.ids) != oracle::ari_pairs(a.ids, b.ids)) ++bad;

      const auto gt = random_labels(3, 4, 4, rng), pred = random_labels(3, 4, 3, rng);
      std::vector<std::int32_t> fa, fb;
      for (std::size_t i = 0; i < gt.ids.size(); ++i) {
        if (gt.ids[i] == 0) continue;
        fa.push_back(pred.ids[i]);
        fb.push_back(gt.ids[i]);
      }
      std::set<std::int32_t> fg(fb.begin(), fb.end());
      const auto got = metrics::ari_fg(pred, gt);
      ++cases;
      if (fg.size() < 2) {
        if (got) ++bad;
      } else if (!got || *got != oracle::ari_pairs(fa, fb)) {
        ++bad;
      }
    }
    out.push_back({"oracle.ari_fg_pairs", bad == 0, fmt("%d/%d mismatches", bad, cases)});
  }

  {
    int bad = 0, cases = 0;
    double worst = 0.0;
    for (int t = 0; t < 300; ++t) {
      Rng rng(11000 + t);
      std::uniform_int_distribution<int> sd(1, 4), kd(1, 4);
      const int h = sd(rng), w = sd(rng);
      const auto gt = random_labels(h, w, kd(rng), rng), pred = random_labels(h, w, kd(rng), rng);
      const double d = std::abs(metrics::miou(pred, gt) - oracle::miou_enumerate(pred, gt));
      worst = std::max(worst, d);
      ++cases;
      if (d > kAssignmentTolerance) ++bad;
      const auto mb = metrics::mbo(pred, gt);
      const bool has_fg = std::any_of(gt.ids.begin(), gt.ids.end(), [](std::int32_t v) { return v != 0; });
      ++cases;
      if (has_fg != mb.has_value() || (mb && *mb != oracle::mbo_direct(pred, gt))) ++bad;
    }
    out.push_back({"oracle.miou_mbo_enumeration", bad == 0, fmt("%d/%d mismatches, max mIoU diff %.3g", bad, cases, worst)});
  }

  {
    int bad = 0, cases = 0, additions = 0;
    for (int seed = 0; seed < kSeeds; ++seed) {
      for (int t = 0; t < 20; ++t) {
        Rng rng(12000 + seed * 100 + t);
        std::uniform_int_distribution<int> sd(1, 4), kd(1, 4), cd(3, 5), capd(0, 16);
        std::uniform_real_distribution<double> td(0.02, 0.6);
        const int h = sd(rng), w = sd(rng), c = cd(rng);
        const auto start = random_slots(kd(rng), c, rng);
        const auto projected = oracle::uniform({c, h, w}, rng);
        refine::RefineConfig rc;
        rc.threshold = td(rng);
        rc.max_added_slots = capd(rng);
        const auto [slots, trace] = refine::add_conflicting_slots(start, projected, rc);
        const auto ref = oracle::add_slots(start.slots, projected, rc.threshold, rc.max_added_slots);
        std::vector<std::int64_t> locs;
        for (const auto& a : trace.additions) locs.push_back(a.location);
        additions += static_cast<int>(locs.size());
        ++cases;
        if (locs != ref.locations || trace.hit_cap != ref.hit_cap || !(slots.slots == ref.slots)) ++bad;
      }
    }
    out.push_back({"oracle.cd_greedy_loop", bad == 0 && additions > 0,
                   fmt("%d/%d mismatches over %d additions", bad, cases, additions)});
  }

  {
    int bad = 0, cases = 0, merges = 0;
    double worst = 0.0;
    for (int t = 0; t < 300; ++t) {
      Rng rng(13000 + t);
      std::uniform_int_distribution<int> kd(1, 5);
      std::uniform_real_distribution<double> td(0.05, 0.8);
      const auto slots = clustered_slots(kd(rng), 4, rng, 0.5);
      const double th = td(rng);
      const auto got = refine::merge_slots(slots, th);
      const auto ref = oracle::merge(slots.slots, th);
      ++cases;
      merges += got.slots.count() < slots.count();
      if (got.groups != ref.groups || got.slots.slots.shape() != ref.slots.shape()) {
        ++bad;
        continue;
      }
      for (std::int64_t i = 0; i < ref.slots.numel(); ++i) {
        worst = std::max(worst, std::abs(got.slots.slots[i] - ref.slots[i]));
      }

      const std::int64_t k = slots.count();
      std::vector<std::vector<double>> dist(k, std::vector<double>(k, 0.0));
      std::uniform_real_distribution<double> dd(0.0, 1.0);
      for (std::int64_t i = 0; i < k; ++i) {
        for (std::int64_t j = i + 1; j < k; ++j) dist[i][j] = dist[j][i] = dd(rng);
      }
      ++cases;
      if (refine::average_linkage_groups(dist, th) != oracle::dendrogram_cut(dist, th)) ++bad;
    }
    const std::vector<std::vector<double>> example = {{0.0, 0.1, 0.1}, {0.1, 0.0, 0.3}, {0.1, 0.3, 0.0}};
    const auto ex = refine::average_linkage_groups(example, 0.2);
    ++cases;
    if (ex.size() != 2 || ex != oracle::dendrogram_cut(example, 0.2)) ++bad;
    out.push_back({"oracle.agglomerative_merge", bad == 0 && worst <= 1e-12 && merges > 0,
                   fmt("%d/%d mismatches, %d merging cases, max slot diff %.3g", bad, cases, merges, worst)});
  }
  return out;
}

std::vector<Check> determinism_suite() {
  std::vector<Check> out;
  const train::TrainConfig cfg = small_train_config();
  const auto data = small_scenes(cfg, cfg.dataset_size);

  auto run = [&](int steps) {
    train::Trainer tr(cfg);
    std::vector<train::StepRecord> log;
    for (int i = 0; i < steps; ++i) log.push_back(tr.step(data));
    return std::make_pair(tr.state(), log);
  };
  const auto [a, log_a] = run(6);
  const auto [b, log_b] = run(6);
  bool same_curve = log_a.size() == log_b.size();
  for (std::size_t i = 0; same_curve && i < log_a.size(); ++i) {
    const auto &x = log_a[i].losses, &y = log_b[i].losses;
    same_curve = x.l1 == y.l1 && x.perceptual == y.perceptual && x.tdg == y.tdg && x.total == y.total &&
                 log_a[i].grad_norm == log_b[i].grad_norm;
  }
  out.push_back({"determinism.same_seed_loss_curve", same_curve && a.params == b.params,
                 fmt("curves equal=%d params equal=%d", same_curve, a.params == b.params)});

  const fs::path dir = fs::temp_directory_path() / fmt("tdg_determinism_%d", static_cast<int>(::getpid()));
  fs::create_directories(dir);
  bool resume_ok = false, roundtrip_ok = false;
  {
    train::Trainer half(cfg);
    for (int i = 0; i < 3; ++i) half.step(data);
    train::save_checkpoint(half.state(), dir / "half.tdgc");
    const auto loaded = train::load_checkpoint(dir / "half.tdgc");
    roundtrip_ok = loaded.params == half.state().params && loaded.frozen == half.state().frozen &&
                   loaded.adam.m == half.state().adam.m && loaded.adam.v == half.state().adam.v &&
                   loaded.adam.t == half.state().adam.t && loaded.step == half.state().step &&
                   train::encode_checkpoint(loaded) == train::encode_checkpoint(half.state());
    train::Trainer resumed(loaded);
    for (int i = 0; i < 3; ++i) resumed.step(data);
    resume_ok = resumed.state().params == a.params && resumed.state().adam.m == a.adam.m &&
                resumed.state().adam.v == a.adam.v && resumed.state().step == a.step;
  }
  out.push_back({"determinism.checkpoint_roundtrip", roundtrip_ok, roundtrip_ok ? "bit-exact" : "differs"});
  out.push_back({"determinism.resume_equivalence", resume_ok, resume_ok ? "6 = 3 + save/load + 3" : "differs"});

  bool dataset_ok = true;
  {
    scenes::SceneConfig sc = cfg.scenes;
    sc.seed = 77;
    scenes::write_dataset(sc, 12, dir / "data");
    const scenes::Dataset ds(dir / "data");
    dataset_ok = ds.size() == 12 && ds.config() == sc;
    for (std::int64_t i = 0; dataset_ok && i < ds.size(); ++i) {
      const auto want = scenes::quantized(scenes::generate_scene(sc, i));
      const auto got = ds.load(i);
      dataset_ok = got.image == want.image && got.labels == want.labels;
    }
  }
  out.push_back({"determinism.dataset_roundtrip", dataset_ok, dataset_ok ? "bit-exact" : "differs"});
  std::error_code ec;
  fs::remove_all(dir, ec);
  return out;
}

}  // namespace tdg::suites
