// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A tensor is a handle to a graph node. Ops executed while grad mode is on
// and at least one input requires grad record a backward closure and keep
// their inputs alive; `backward` replays those closures in reverse creation
// order. Training runs in float; the double instantiation exists so that
// finite-difference oracles can re-evaluate the same graph in 64-bit.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cwamsn::nd {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string to_string(const Shape& shape);

/// Cache-line aligned allocator. Eigen's vectorized reductions peel a
/// different number of leading elements depending on the buffer address, so
/// fixed alignment keeps results bit-identical from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty == absent
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  /// Lazily allocated gradient buffer.
  std::span<T> grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T{0});
    return grad;
  }
};

std::uint64_t next_seq();

}  // namespace detail

/// Keeps freed activation buffers in the process heap instead of returning
/// them to the OS, so each training step reuses warm pages. No-op off glibc.
void keep_heap_warm();

/// Thread-local switch for tape recording.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

/// Disables recording for its lifetime (EMA updates, target branch, eval).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using NodeType = detail::Node<T>;

  BasicTensor() = default;
  explicit BasicTensor(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor from_data(Shape shape, Buffer<T> values, bool requires_grad = false);
  static BasicTensor from_data(Shape shape, const std::vector<T>& values, bool requires_grad = false) {
    return from_data(std::move(shape), Buffer<T>(values.begin(), values.end()), requires_grad);
  }
  static BasicTensor from_data(Shape shape, std::initializer_list<T> values, bool requires_grad = false) {
    return from_data(std::move(shape), Buffer<T>(values), requires_grad);
  }
  static BasicTensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  /// Size along `axis`; negative axes count from the end.
  std::size_t size(int axis) const;

  std::span<const T> data() const { return node_->data; }
  /// Direct buffer access for in-place updates of leaves (optimizer, EMA).
  std::span<T> data_mut() { return node_->data; }
  std::vector<T> to_vector() const { return {node_->data.begin(), node_->data.end()}; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  BasicTensor& set_requires_grad(bool on);
  bool is_leaf() const { return !node_->backward; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad_mut() { return node_->grad_buffer(); }
  void clear_grad() { node_->grad.clear(); }

  /// Copy of the values with no graph attached.
  BasicTensor detach() const;
  template <typename U>
  BasicTensor<U> cast() const {
    Buffer<U> out(node_->data.begin(), node_->data.end());
    return BasicTensor<U>::from_data(node_->shape, std::move(out), false);
  }

  std::string_view op_name() const { return node_->op; }
  NodeType* node() const { return node_.get(); }
  const std::shared_ptr<NodeType>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<NodeType> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Reverse-topological record of the nodes reachable from a root that take
/// part in differentiation. Nodes are ordered by descending creation sequence,
/// which is a valid reverse topological order because an op's output is always
/// created after its inputs.
template <typename T>
class Tape {
 public:
  static Tape collect(const BasicTensor<T>& root);
  const std::vector<std::shared_ptr<detail::Node<T>>>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  template <typename U>
  friend void backward(const BasicTensor<U>& loss);
  std::vector<std::shared_ptr<detail::Node<T>>> nodes_;
};

/// Populates `grad` of every requires-grad leaf reachable from `loss`.
/// Intermediate gradients and backward closures are released as the replay
/// proceeds, so a graph can be differentiated once.
template <typename T>
void backward(const BasicTensor<T>& loss);

}  // namespace cwamsn::nd
