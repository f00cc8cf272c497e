#include "tdg/adam.hpp"

#include <cmath>

namespace tdg {

template <typename T>
void adam_step(ParamMap<T>& params, const ParamMap<T>& grads, AdamState<T>& state) {
  if (state.t < 0) throw std::invalid_argument("adam_step: negative step counter");
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("adam_step: gradient for unknown parameter '" + name + "'");
    if (g.shape() != it->second.shape()) {
      throw ShapeError("adam_step: gradient shape " + shape_str(g.shape()) + " != parameter shape " +
                       shape_str(it->second.shape()) + " for '" + name + "'");
    }
    if (!all_finite(g)) throw NonFiniteGradient(name);
  }

  state.t += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (auto& [name, p] : params) {
    auto& m = state.m.try_emplace(name, p.shape(), T{0}).first->second;
    auto& v = state.v.try_emplace(name, p.shape(), T{0}).first->second;
    auto git = grads.find(name);
    const T* g = git == grads.end() ? nullptr : git->second.data().data();
    auto pd = p.data();
    auto md = m.data();
    auto vd = v.data();
    for (std::size_t i = 0; i < pd.size(); ++i) {
      const double gi = g ? static_cast<double>(g[i]) : 0.0;
      const double mi = state.beta1 * md[i] + (1.0 - state.beta1) * gi;
      const double vi = state.beta2 * vd[i] + (1.0 - state.beta2) * gi * gi;
      md[i] = static_cast<T>(mi);
      vd[i] = static_cast<T>(vi);
      const double step = state.lr * (mi / c1) / (std::sqrt(vi / c2) + state.epsilon);
      pd[i] = static_cast<T>(static_cast<double>(pd[i]) - step);
    }
  }
}

template <typename T>
double clip_grad_norm(ParamMap<T>& grads, double max_norm) {
  double ss = 0.0;
  for (const auto& [name, g] : grads) {
    for (T v : g.data()) ss += static_cast<double>(v) * static_cast<double>(v);
  }
  const double norm = std::sqrt(ss);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (auto& [name, g] : grads) {
      for (T& v : g.data()) v = static_cast<T>(static_cast<double>(v) * scale);
    }
  }
  return norm;
}

template void adam_step(ParamMap<float>&, const ParamMap<float>&, AdamState<float>&);
template void adam_step(ParamMap<double>&, const ParamMap<double>&, AdamState<double>&);
template double clip_grad_norm(ParamMap<float>&, double);
template double clip_grad_norm(ParamMap<double>&, double);

}  // namespace tdg
