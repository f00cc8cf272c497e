#pragma once

#include <optional>
#include <span>
#include <vector>

#include "tdg/tape.hpp"
#include "tdg/tensor.hpp"

// Primitive catalog. Shape rules are stated next to each op; violations throw
// tdg::ShapeError naming the offending axes.
namespace tdg::ad {

// x (N,C,H,W), w (O,C,kh,kw), optional bias (O) -> (N,O,(H+2p-kh)/s+1,(W+2p-kw)/s+1)
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, int stride = 1, int padding = 0);
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride = 1, int padding = 0);

// (N,C,H,W) -> (N,C,H*f,W*f)
template <typename T>
Var<T> upsample_nearest(const Var<T>& x, int factor);

// Non-overlapping box average; (N,C,H,W) -> (N,C,H/k,W/k), H and W divisible by k.
template <typename T>
Var<T> avg_pool(const Var<T>& x, int kernel);

// (...,M,K) x (...,K,N) -> (...,M,N). The right operand may be rank 2 and is then
// shared across all leading batch axes of the left operand.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> softmax(const Var<T>& x, int axis);

// Normalizes over the last axis without affine terms.
template <typename T>
Var<T> layer_norm(const Var<T>& x, T eps = T(1e-5));

template <typename T>
Var<T> relu(const Var<T>& x);
template <typename T>
Var<T> sigmoid(const Var<T>& x);
template <typename T>
Var<T> tanh(const Var<T>& x);

// Elementwise with numpy-style broadcasting.
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> add_scalar(const Var<T>& x, T s);
template <typename T>
Var<T> mul_scalar(const Var<T>& x, T s);

// Mean absolute difference over all elements; subgradient 0 where a == b.
template <typename T>
Var<T> l1_distance(const Var<T>& a, const Var<T>& b);
// Mean squared difference over all elements.
template <typename T>
Var<T> squared_distance(const Var<T>& a, const Var<T>& b);

// a.b / max(|a||b|, eps) along `axis`; the axis is removed from the output shape.
template <typename T>
Var<T> cosine_similarity(const Var<T>& a, const Var<T>& b, int axis, T eps = T(1e-8));

// x / max(|x|, eps) along `axis`.
template <typename T>
Var<T> l2_normalize(const Var<T>& x, int axis, T eps = T(1e-8));

// Same value, never propagates gradient.
template <typename T>
Var<T> stop_gradient(const Var<T>& x);

template <typename T>
Var<T> broadcast_to(const Var<T>& x, const Shape& shape);
template <typename T>
Var<T> reshape(const Var<T>& x, const Shape& shape);
template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<int>& perm);
template <typename T>
Var<T> slice(const Var<T>& x, int axis, std::int64_t start, std::int64_t length);

template <typename T>
Var<T> sum(const Var<T>& x, int axis, bool keepdim = false);
template <typename T>
Var<T> mean(const Var<T>& x, int axis, bool keepdim = false);
// Ties resolve to the lowest index along the axis.
template <typename T>
Var<T> min(const Var<T>& x, int axis, bool keepdim = false);
template <typename T>
Var<T> max(const Var<T>& x, int axis, bool keepdim = false);
template <typename T>
Var<T> sum_all(const Var<T>& x);
template <typename T>
Var<T> mean_all(const Var<T>& x);

/// Weights of a GRU cell; input width I, hidden width H. Matrices are (I,H) or (H,H).
template <typename T>
struct GruWeights {
  Var<T> w_ir, w_iz, w_in;
  Var<T> w_hr, w_hz, w_hn;
  Var<T> b_ir, b_iz, b_in;
  Var<T> b_hr, b_hz, b_hn;
};

// x (B,I), h (B,H) -> (B,H); composed from matmul/sigmoid/tanh primitives.
template <typename T>
Var<T> gru_cell(const Var<T>& x, const Var<T>& h, const GruWeights<T>& w);

/// Attribute bag for the generic dispatcher. Only the fields a primitive reads matter.
struct PrimitiveAttrs {
  int stride = 1;
  int padding = 0;
  int factor = 2;
  int axis = -1;
  bool keepdim = false;
  double eps = 1e-8;
  double scalar = 0.0;
  Shape shape;
  std::vector<int> perm;
  std::int64_t start = 0;
  std::int64_t length = 0;
};

// Generic entry point: dispatches `kind` to the typed op above. gru_cell expects
// inputs (x, h, w_ir, w_iz, w_in, w_hr, w_hz, w_hn, b_ir, b_iz, b_in, b_hr, b_hz, b_hn).
template <typename T>
Var<T> apply_primitive(Primitive kind, std::span<const Var<T>> inputs, const PrimitiveAttrs& attrs = {});

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  return add(a, b);
}
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
  return sub(a, b);
}
template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
  return mul(a, b);
}

Shape broadcast_shape(const Shape& a, const Shape& b);

}  // namespace tdg::ad
