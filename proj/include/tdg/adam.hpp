#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "tdg/tensor.hpp"

namespace tdg {

/// Named parameter tensors; iteration order is the name order.
template <typename T>
using ParamMap = std::map<std::string, Tensor<T>>;

/// Raised when a gradient holds NaN or Inf; no parameter has been touched.
class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& param)
      : std::runtime_error("non-finite gradient for parameter '" + param + "'"), param_(param) {}
  const std::string& param() const { return param_; }

 private:
  std::string param_;
};

template <typename T>
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t t = 0;
  ParamMap<T> m;
  ParamMap<T> v;
};

// Bias-corrected Adam. Parameters absent from `grads` are treated as having zero gradient.
template <typename T>
void adam_step(ParamMap<T>& params, const ParamMap<T>& grads, AdamState<T>& state);

// Scales all gradients so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
template <typename T>
double clip_grad_norm(ParamMap<T>& grads, double max_norm);

}  // namespace tdg
