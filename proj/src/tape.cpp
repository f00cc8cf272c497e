#include "tdg/tape.hpp"

#include <array>
#include <stdexcept>
#include <string>

namespace tdg::ad {

std::string_view primitive_name(Primitive kind) {
  static constexpr std::array<std::string_view, static_cast<std::size_t>(Primitive::kCount)> kNames = {
      "leaf",          "conv2d",         "upsample_nearest", "avg_pool",         "matmul",
      "softmax",       "layer_norm",     "relu",             "sigmoid",          "tanh",
      "gru_cell",      "add",            "sub",              "mul",              "div",
      "add_scalar",    "mul_scalar",     "l1_distance",      "squared_distance", "cosine_similarity",
      "l2_normalize",  "stop_gradient",  "broadcast",        "reshape",          "permute",
      "slice",         "reduce_sum",     "reduce_mean",      "reduce_min",       "reduce_max",
  };
  auto i = static_cast<std::size_t>(kind);
  if (i >= kNames.size()) throw std::invalid_argument("unknown primitive id " + std::to_string(i));
  return kNames[i];
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  Node n;
  n.kind = Primitive::kLeaf;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(Primitive kind, std::span<const Var<T>> inputs, Tensor<T> value, BackwardFn backward,
                       bool propagate) {
  Node n;
  n.kind = kind;
  n.value = std::move(value);
  bool any = false;
  for (const auto& in : inputs) {
    if (&in.tape() != this) throw std::invalid_argument("inputs of " + std::string(primitive_name(kind)) + " live on another tape");
    any = any || nodes_[in.id()].requires_grad;
  }
  n.requires_grad = propagate && any;
  if (n.requires_grad) {
    n.inputs.reserve(inputs.size());
    for (const auto& in : inputs) n.inputs.push_back(in.id());
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
const Tensor<T>* Tape<T>::grad(std::size_t id) const {
  const Node& n = nodes_.at(id);
  return n.has_grad ? &n.grad : nullptr;
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(std::size_t id) {
  Node& n = nodes_.at(id);
  if (!n.has_grad) {
    n.grad = Tensor<T>(n.value.shape(), T{0});
    n.has_grad = true;
  }
  return n.grad;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (&loss.tape() != this) throw std::invalid_argument("backward: loss lives on another tape");
  if (loss.value().numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  visit_order_.clear();
  if (!nodes_[loss.id()].requires_grad) return;
  grad_buffer(loss.id())[0] = T{1};
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.requires_grad) continue;
    visit_order_.push_back(i);
    if (n.backward) n.backward(*this, i);
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace tdg::ad
