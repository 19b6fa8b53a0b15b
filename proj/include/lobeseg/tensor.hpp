#ifndef LOBESEG_TENSOR_HPP
#define LOBESEG_TENSOR_HPP

#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "lobeseg/common.hpp"

namespace lobeseg {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// One recorded node of the computation graph. Leaves have no backward_fn;
// interior nodes capture their inputs and whatever values the backward rule
// needs inside the closure.
template <class T>
struct TapeNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TapeNode<T>>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(TapeNode<T>&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
};

template <class T>
using NodePtr = std::shared_ptr<TapeNode<T>>;

// Thread-local switch: when disabled, ops run forward-only and record nothing.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev); }
};

// Value-semantic handle onto a shared tape node. Tensors are immutable after
// creation except for leaf parameter updates between graph constructions and
// gradient buffers during backward.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(NodePtr<T> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static Tensor filled(Shape shape, T v, bool requires_grad = false) {
    auto node = std::make_shared<TapeNode<T>>();
    node->value.assign(static_cast<std::size_t>(shape_numel(shape)), v);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor from_vector(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
      throw DimensionError(concat("tensor data length ", values.size(),
                                  " does not match shape ", shape_str(shape)));
    auto node = std::make_shared<TapeNode<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from_vector({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t numel() const { return node_->numel(); }
  std::int64_t dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  const char* op() const { return node_->op; }
  bool is_leaf() const { return !node_->backward_fn; }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> data() const { return {node_->value.data(), node_->value.size()}; }

  // Leaf-only mutation hook for optimizers and state buffers.
  std::span<T> mutable_data() {
    if (!is_leaf())
      throw ContractError(concat("mutable_data on non-leaf tensor (op ", node_->op, ")"));
    return {node_->value.data(), node_->value.size()};
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const {
    if (node_->grad.empty())
      throw ContractError("gradient requested but none has been accumulated");
    return {node_->grad.data(), node_->grad.size()};
  }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (numel() != 1) throw ContractError(concat("item() on tensor of shape ", shape_str(shape())));
    return node_->value[0];
  }

  NodePtr<T> node() const { return node_; }

 private:
  NodePtr<T> node_;
};

// Reverse-mode sweep from a scalar loss. Visits the recorded graph in reverse
// topological order exactly once, seeds d(loss)/d(loss) = 1, accumulates leaf
// gradients, then releases the graph (interior grads, closures, input edges).
template <class T>
void backward(const Tensor<T>& loss);

extern template void backward<float>(const Tensor<float>&);
extern template void backward<double>(const Tensor<double>&);

extern template struct TapeNode<float>;
extern template struct TapeNode<double>;
extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace lobeseg

#endif  // LOBESEG_TENSOR_HPP
