#include <doctest.h>

#include <cmath>

#include "tdg/adam.hpp"

using namespace tdg;

namespace {

ParamMap<double> one(double v) { return {{"w", Tensor<double>::scalar(v)}}; }

}  // namespace

TEST_CASE("first Adam step moves by lr against the gradient") {
  auto p = one(0.0);
  AdamState<double> st;
  st.lr = 1e-3;
  adam_step(p, one(1.0), st);
  CHECK(std::abs(p.at("w").item() + 1e-3) < 1e-9);
  CHECK(st.t == 1);
}

TEST_CASE("zero gradient on fresh state leaves parameters alone") {
  auto p = one(0.25);
  AdamState<double> st;
  adam_step(p, one(0.0), st);
  CHECK(p.at("w").item() == 0.25);
  adam_step(p, {}, st);
  CHECK(p.at("w").item() == 0.25);
  CHECK(st.t == 2);
}

TEST_CASE("constant gradient: steps stay within lr and follow the recurrence") {
  auto p = one(1.0);
  AdamState<double> st;
  st.lr = 0.01;
  double m = 0.0, v = 0.0, x = 1.0;
  for (int t = 1; t <= 2; ++t) {
    const double before = p.at("w").item();
    adam_step(p, one(0.5), st);
    m = 0.9 * m + 0.1 * 0.5;
    v = 0.999 * v + 0.001 * 0.25;
    x -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    CHECK(std::abs(p.at("w").item() - before) <= 0.01 * (1 + 1e-6));
    CHECK(p.at("w").item() == doctest::Approx(x).epsilon(1e-12));
  }
  CHECK(st.m.at("w").shape() == p.at("w").shape());
}

TEST_CASE("non-finite gradient aborts before any update") {
  ParamMap<double> p = {{"a", Tensor<double>::scalar(1.0)}, {"b", Tensor<double>::scalar(2.0)}};
  ParamMap<double> g = {{"a", Tensor<double>::scalar(1.0)}, {"b", Tensor<double>::scalar(NAN)}};
  AdamState<double> st;
  CHECK_THROWS_AS(adam_step(p, g, st), NonFiniteGradient);
  CHECK(p.at("a").item() == 1.0);
  CHECK(st.t == 0);
}

TEST_CASE("clipping rescales to the target norm") {
  ParamMap<double> g = {{"a", Tensor<double>(Shape{2}, {3.0, 0.0})}, {"b", Tensor<double>::scalar(4.0)}};
  CHECK(clip_grad_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g.at("a")[0] == doctest::Approx(0.6));
  CHECK(g.at("b").item() == doctest::Approx(0.8));
  CHECK(clip_grad_norm(g, 10.0) == doctest::Approx(1.0));
  CHECK(g.at("b").item() == doctest::Approx(0.8));
}
