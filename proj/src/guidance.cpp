#include "tdg/guidance.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace tdg::guidance {

using ad::Var;

LossReport total_loss(double l1, double perceptual, double tdg, double lambda_td) {
  if (l1 < 0.0 || perceptual < 0.0 || tdg < 0.0 || lambda_td < 0.0) {
    throw std::invalid_argument("total_loss: components and weight must be non-negative");
  }
  return {l1, perceptual, tdg, l1 + perceptual + lambda_td * tdg, lambda_td};
}

template <typename T>
Var<T> total_loss(const Var<T>& l1, const Var<T>& perceptual, const Var<T>& tdg, T lambda_td) {
  if (lambda_td < T{0}) throw std::invalid_argument("total_loss: lambda_td must be non-negative");
  Var<T> total;
  auto accumulate = [&](const Var<T>& term) { total = total.valid() ? ad::add(total, term) : term; };
  if (l1.valid()) accumulate(l1);
  if (perceptual.valid()) accumulate(perceptual);
  if (tdg.valid()) accumulate(ad::mul_scalar(tdg, lambda_td));
  if (!total.valid()) throw std::invalid_argument("total_loss: no loss term enabled");
  return total;
}

template <typename T>
Var<T> build_guidance(const Var<T>& slots, const Var<T>& masks, int stride) {
  if (slots.rank() != 3 || masks.rank() != 4) {
    throw ShapeError("build_guidance: expected slots (N,K,C) and masks (N,K,H,W), got " + shape_str(slots.shape()) +
                     " and " + shape_str(masks.shape()));
  }
  if (slots.dim(0) != masks.dim(0) || slots.dim(1) != masks.dim(1)) {
    throw ShapeError("build_guidance: slot/mask mismatch on axes [0,1]: " + shape_str(slots.shape()) + " vs " +
                     shape_str(masks.shape()));
  }
  const std::int64_t n = slots.dim(0), k = slots.dim(1), c = slots.dim(2);
  const Var<T> s = ad::stop_gradient(slots);
  const Var<T> m = ad::avg_pool(ad::stop_gradient(masks), stride);
  const std::int64_t h = m.dim(2), w = m.dim(3);
  const Var<T> field = ad::matmul(ad::permute(s, {0, 2, 1}), ad::reshape(m, Shape{n, k, h * w}));
  return ad::stop_gradient(ad::reshape(field, Shape{n, c, h, w}));
}

template <typename T>
Var<T> reencode_reconstruction(const model::Binding<T>& p, const model::ModelConfig& cfg,
                               const Var<T>& reconstruction) {
  return model::encode_backbone(p, cfg, ad::stop_gradient(reconstruction));
}

template <typename T>
Var<T> tdg_loss(const Var<T>& projected, const Var<T>& guidance) {
  if (projected.shape() != guidance.shape()) {
    throw ShapeError("tdg_loss: projected " + shape_str(projected.shape()) + " vs guidance " +
                     shape_str(guidance.shape()));
  }
  const Var<T> sim = ad::cosine_similarity(projected, guidance, 1);
  return ad::add_scalar(ad::mul_scalar(ad::mean_all(sim), T{-1}), T{1});
}

template <typename T>
ParamMap<T> init_perceptual_params(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto unit = [&] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
  ParamMap<T> p;
  std::int64_t in = 3;
  for (int s = 0; s < PerceptualSpec::kStages; ++s) {
    const std::int64_t out = PerceptualSpec::kWidths[s];
    const double bound = std::sqrt(6.0 / static_cast<double>(in * 9));
    Tensor<T> w(Shape{out, in, 3, 3});
    for (T& v : w.data()) v = static_cast<T>((2.0 * unit() - 1.0) * bound);
    Tensor<T> b(Shape{out});
    for (T& v : b.data()) v = static_cast<T>((2.0 * unit() - 1.0) * 0.1);
    const std::string name = "perceptual.stage" + std::to_string(s + 1);
    p.emplace(name + ".weight", std::move(w));
    p.emplace(name + ".bias", std::move(b));
    in = out;
  }
  return p;
}

template <typename T>
std::vector<Var<T>> perceptual_features(const model::Binding<T>& frozen, const Var<T>& images) {
  std::vector<Var<T>> taps;
  Var<T> x = images;
  for (int s = 0; s < PerceptualSpec::kStages; ++s) {
    const std::string name = "perceptual.stage" + std::to_string(s + 1);
    const Var<T> pre = ad::conv2d(x, frozen(name + ".weight"), frozen(name + ".bias"), PerceptualSpec::kStrides[s], 1);
    taps.push_back(pre);
    x = ad::relu(pre);
  }
  return taps;
}

template <typename T>
ReconstructionLoss<T> reconstruction_loss(const model::Binding<T>& frozen, const Var<T>& reconstruction,
                                          const Var<T>& images) {
  if (reconstruction.shape() != images.shape()) {
    throw ShapeError("reconstruction_loss: reconstruction " + shape_str(reconstruction.shape()) + " vs image " +
                     shape_str(images.shape()));
  }
  ReconstructionLoss<T> out;
  out.l1 = ad::l1_distance(reconstruction, images);
  const auto fr = perceptual_features(frozen, reconstruction);
  const auto fi = perceptual_features(frozen, images);
  Var<T> acc;
  for (std::size_t s = 0; s < fr.size(); ++s) {
    const T channels = static_cast<T>(fr[s].dim(1));
    const Var<T> ur = ad::l2_normalize(fr[s], 1, T(1e-6));
    const Var<T> ui = ad::l2_normalize(fi[s], 1, T(1e-6));
    // squared_distance averages over channels too; rescale to a per-location sum.
    const Var<T> d = ad::mul_scalar(ad::squared_distance(ur, ui), T(0.5) * channels / static_cast<T>(fr.size()));
    acc = acc.valid() ? ad::add(acc, d) : d;
  }
  out.perceptual = acc;
  return out;
}

Tensor<double> guidance_field(const model::SlotSet& slots, const model::MaskStack& masks, int stride) {
  const auto& m = masks.masks;
  if (m.rank() != 3 || m.dim(0) != slots.count()) {
    throw ShapeError("guidance_field: " + std::to_string(slots.count()) + " slots vs masks " + shape_str(m.shape()));
  }
  ad::Tape<double> tape;
  const Var<double> s = tape.constant(slots.slots.reshaped(Shape{1, slots.count(), slots.dim()}));
  const Var<double> mm = tape.constant(m.reshaped(Shape{1, m.dim(0), m.dim(1), m.dim(2)}));
  const Tensor<double>& f = build_guidance(s, mm, stride).value();
  return f.reshaped(Shape{f.dim(1), f.dim(2), f.dim(3)});
}

#define TDG_INSTANTIATE_GUIDANCE(T)                                                                               \
  template Var<T> total_loss(const Var<T>&, const Var<T>&, const Var<T>&, T);                                    \
  template Var<T> build_guidance(const Var<T>&, const Var<T>&, int);                                             \
  template Var<T> reencode_reconstruction(const model::Binding<T>&, const model::ModelConfig&, const Var<T>&);   \
  template Var<T> tdg_loss(const Var<T>&, const Var<T>&);                                                        \
  template ParamMap<T> init_perceptual_params<T>(std::uint64_t);                                                 \
  template std::vector<Var<T>> perceptual_features(const model::Binding<T>&, const Var<T>&);                     \
  template ReconstructionLoss<T> reconstruction_loss(const model::Binding<T>&, const Var<T>&, const Var<T>&);

TDG_INSTANTIATE_GUIDANCE(float)
TDG_INSTANTIATE_GUIDANCE(double)

}  // namespace tdg::guidance
