#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "tdg/tensor.hpp"

namespace tdg::ad {

/// Every operation the tape knows how to record.
enum class Primitive : std::uint8_t {
  kLeaf,
  kConv2d,
  kUpsampleNearest,
  kAvgPool,
  kMatmul,
  kSoftmax,
  kLayerNorm,
  kRelu,
  kSigmoid,
  kTanh,
  kGruCell,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kAddScalar,
  kMulScalar,
  kL1Distance,
  kSquaredDistance,
  kCosineSimilarity,
  kL2Normalize,
  kStopGradient,
  kBroadcast,
  kReshape,
  kPermute,
  kSlice,
  kReduceSum,
  kReduceMean,
  kReduceMin,
  kReduceMax,
  kCount,
};

std::string_view primitive_name(Primitive kind);

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::int64_t dim(int axis) const { return value().dim(axis); }
  int rank() const { return value().rank(); }
  bool requires_grad() const;
  // Null until backward() has routed gradient to this node.
  const Tensor<T>* grad() const;

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run gradient tape. Nodes are appended in evaluation order, so the
/// recording order is a topological order and backward walks it in reverse.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  struct Node {
    Primitive kind = Primitive::kLeaf;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad);
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  // Appends a primitive application. The node requires grad iff some input does
  // and `propagate` is set; otherwise the backward closure is dropped.
  Var<T> record(Primitive kind, std::span<const Var<T>> inputs, Tensor<T> value, BackwardFn backward,
                bool propagate = true);

  void backward(const Var<T>& loss);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor<T>* grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient accumulator for `id`, zero-filled on first access.
  Tensor<T>& grad_buffer(std::size_t id);

  // Ids of nodes visited by the last backward(), in visit order.
  const std::vector<std::size_t>& last_backward_order() const { return visit_order_; }

 private:
  std::deque<Node> nodes_;
  std::vector<std::size_t> visit_order_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}

template <typename T>
const Tensor<T>* Var<T>::grad() const {
  return tape_->grad(id_);
}

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace tdg::ad
