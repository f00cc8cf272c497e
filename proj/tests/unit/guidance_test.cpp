#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "suites.hpp"
#include "tdg/guidance.hpp"
#include "tdg/ops.hpp"

using namespace tdg;
using ad::Tape;

TEST_CASE("weighted total") {
  CHECK(guidance::total_loss(0.2, 0.1, 0.5, 0.1).total == doctest::Approx(0.35).epsilon(1e-12));
  CHECK(guidance::total_loss(0.2, 0.1, 0.5, 0.0).total == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(guidance::total_loss(0.0, 0.0, 0.0, 0.1).total == 0.0);
  CHECK_THROWS_AS(guidance::total_loss(-0.1, 0.0, 0.0, 0.1), std::invalid_argument);

  Tape<double> tape;
  const auto a = tape.constant(Tensor<double>::scalar(0.2));
  const auto c = tape.constant(Tensor<double>::scalar(0.5));
  CHECK(guidance::total_loss(a, ad::Var<double>{}, c, 0.1).value().item() == doctest::Approx(0.25));
  CHECK(guidance::total_loss(a, ad::Var<double>{}, ad::Var<double>{}, 0.1).value().item() == 0.2);
}

TEST_CASE("guidance field is the mask-weighted slot mixture") {
  SUBCASE("one slot, full mask") {
    const model::SlotSet s{Tensor<double>(Shape{1, 3}, {0.6, 0.8, 0.0}), true};
    const model::MaskStack m{Tensor<double>(Shape{1, 8, 8}, 1.0)};
    const auto f = guidance::guidance_field(s, m, 4);
    CHECK(f.shape() == Shape{3, 2, 2});
    for (int l = 0; l < 4; ++l) {
      CHECK(f[0 * 4 + l] == doctest::Approx(0.6));
      CHECK(f[1 * 4 + l] == doctest::Approx(0.8));
      CHECK(f[2 * 4 + l] == 0.0);
    }
  }
  SUBCASE("hard masks pick the owning slot") {
    const model::SlotSet s{Tensor<double>(Shape{2, 2}, {1.0, 0.0, 0.0, 1.0}), true};
    Tensor<double> m(Shape{2, 8, 8}, 0.0);
    for (int y = 0; y < 8; ++y) {
      for (int x = 0; x < 8; ++x) m.at({x < 4 ? 0 : 1, y, x}) = 1.0;
    }
    const auto f = guidance::guidance_field(s, {m}, 4);
    CHECK(f.at({0, 0, 0}) == 1.0);
    CHECK(f.at({1, 0, 0}) == 0.0);
    CHECK(f.at({0, 1, 1}) == 0.0);
    CHECK(f.at({1, 1, 1}) == 1.0);
  }
  SUBCASE("even split of two basis slots") {
    const model::SlotSet s{Tensor<double>(Shape{2, 4}, {1, 0, 0, 0, 0, 1, 0, 0}), true};
    const auto f = guidance::guidance_field(s, {Tensor<double>(Shape{2, 4, 4}, 0.5)}, 4);
    CHECK(f.at({0, 0, 0}) == 0.5);
    CHECK(f.at({1, 0, 0}) == 0.5);
    CHECK(f.at({2, 0, 0}) == 0.0);
  }
  CHECK_THROWS_AS(guidance::guidance_field({Tensor<double>(Shape{2, 2}), true}, {Tensor<double>(Shape{3, 4, 4})}, 4),
                  ShapeError);
}

TEST_CASE("guidance carries no gradient to slots or masks") {
  oracle::Rng rng(1);
  Tape<double> tape;
  const auto s = tape.leaf(oracle::uniform({1, 2, 3}, rng), true);
  const auto m = tape.leaf(oracle::uniform({1, 2, 4, 4}, rng, 0.0, 1.0), true);
  const auto f = guidance::build_guidance(s, m, 4);
  CHECK_FALSE(f.requires_grad());
}

TEST_CASE("re-encoding: decoder gets nothing, backbone gets gradient") {
  oracle::Rng rng(2);
  const auto cfg = suites::tiny_model();
  const auto params = model::init_params<double>(cfg, 2);
  Tape<double> tape;
  const model::Binding<double> p(tape, params, true);
  const auto bu = model::forward_bottom_up(p, cfg, tape.constant(oracle::uniform({1, 3, 8, 8}, rng, 0.0, 1.0)));
  const auto fhat = guidance::reencode_reconstruction(p, cfg, bu.reconstruction);
  CHECK(fhat.shape() == Shape{1, 4, 2, 2});
  tape.backward(ad::sum_all(ad::mul(fhat, fhat)));
  const auto g = p.grads();
  double dec = 0.0, bb = 0.0;
  for (const auto& [name, t] : g) {
    for (double v : t.data()) {
      if (model::param_group(name) == "decoder") dec = std::max(dec, std::abs(v));
      if (model::param_group(name) == "backbone") bb = std::max(bb, std::abs(v));
    }
  }
  CHECK(dec == 0.0);
  CHECK(bb > 0.0);
}

TEST_CASE("guidance loss at the cosine extremes") {
  oracle::Rng rng(3);
  const auto g = oracle::uniform({2, 3, 2, 2}, rng);
  Tensor<double> neg = g, orth(Shape{2, 3, 2, 2});
  for (std::int64_t i = 0; i < neg.numel(); ++i) neg[i] = -g[i];
  // Orthogonal per location: rotate (a, b, c) to (b, -a, 0) after zeroing c in the target.
  Tensor<double> flat = g;
  for (int n = 0; n < 2; ++n) {
    for (int l = 0; l < 4; ++l) {
      flat[(n * 3 + 2) * 4 + l] = 0.0;
      orth[(n * 3 + 0) * 4 + l] = g[(n * 3 + 1) * 4 + l];
      orth[(n * 3 + 1) * 4 + l] = -g[(n * 3 + 0) * 4 + l];
    }
  }
  Tape<double> tape;
  CHECK(std::abs(guidance::tdg_loss(tape.constant(g), tape.constant(g)).value().item()) < 1e-12);
  CHECK(guidance::tdg_loss(tape.constant(orth), tape.constant(flat)).value().item() == doctest::Approx(1.0));
  CHECK(guidance::tdg_loss(tape.constant(neg), tape.constant(g)).value().item() == doctest::Approx(2.0));
}

TEST_CASE("reconstruction loss") {
  oracle::Rng rng(4);
  const auto frozen = guidance::init_perceptual_params<double>(7);
  const auto img = oracle::uniform({2, 3, 8, 8}, rng, 0.0, 1.0);
  Tape<double> tape;
  const model::Binding<double> fb(tape, frozen, false);
  const auto same = guidance::reconstruction_loss(fb, tape.constant(img), tape.constant(img));
  CHECK(same.l1.value().item() == 0.0);
  CHECK(same.perceptual.value().item() == 0.0);

  Tensor<double> shifted = img;
  for (double& v : shifted.data()) v += 0.5;
  CHECK(guidance::reconstruction_loss(fb, tape.constant(shifted), tape.constant(img)).l1.value().item() ==
        doctest::Approx(0.5));

  // Direct re-evaluation: per stage, mean over locations of 0.5 |u - v|^2 of channel-normalized taps.
  const auto recon = oracle::uniform({2, 3, 8, 8}, rng, 0.0, 1.0);
  const int strides[] = {1, 2, 2};
  Tensor<double> xa = recon, xb = img;
  double want = 0.0;
  for (int s = 0; s < 3; ++s) {
    const std::string name = "perceptual.stage" + std::to_string(s + 1);
    const auto fa = oracle::conv2d(xa, frozen.at(name + ".weight"), &frozen.at(name + ".bias"), strides[s], 1);
    const auto fb2 = oracle::conv2d(xb, frozen.at(name + ".weight"), &frozen.at(name + ".bias"), strides[s], 1);
    const std::int64_t n = fa.dim(0), c = fa.dim(1), plane = fa.dim(2) * fa.dim(3);
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t l = 0; l < plane; ++l) {
        double na = 0.0, nb = 0.0;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          na += std::pow(fa[(i * c + ch) * plane + l], 2);
          nb += std::pow(fb2[(i * c + ch) * plane + l], 2);
        }
        na = std::max(std::sqrt(na), 1e-6);
        nb = std::max(std::sqrt(nb), 1e-6);
        for (std::int64_t ch = 0; ch < c; ++ch) {
          acc += 0.5 * std::pow(fa[(i * c + ch) * plane + l] / na - fb2[(i * c + ch) * plane + l] / nb, 2);
        }
      }
    }
    want += acc / static_cast<double>(n * plane) / 3.0;
    xa = fa;
    xb = fb2;
    for (double& v : xa.data()) v = std::max(v, 0.0);
    for (double& v : xb.data()) v = std::max(v, 0.0);
  }
  const auto got = guidance::reconstruction_loss(fb, tape.constant(recon), tape.constant(img));
  CHECK(got.perceptual.value().item() == doctest::Approx(want).epsilon(1e-9));
  CHECK_THROWS_AS(guidance::reconstruction_loss(fb, tape.constant(recon), tape.constant(Tensor<double>(Shape{2, 3, 8, 4}))),
                  ShapeError);
}

TEST_CASE("perceptual extractor is fixed by its seed") {
  CHECK(guidance::init_perceptual_params<float>(3) == guidance::init_perceptual_params<float>(3));
  for (const auto& [name, t] : guidance::init_perceptual_params<float>(3)) CHECK(name.rfind("perceptual.", 0) == 0);
}
