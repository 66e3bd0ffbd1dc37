// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dimple {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

// One record of the computation graph. Non-leaf nodes keep their parents and a
// closure that pushes this node's gradient into them.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient reaches the node
  bool requires_grad = false;
  bool backward_done = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer();
};

}  // namespace detail

/// Dense row-major 64-bit tensor with optional reverse-mode gradient.
///
/// Tensor is a cheap handle: copies share the same node. Values produced by
/// an op are immutable; only leaves created by the factories may be written
/// through mutable_data(), and only before they are used in a graph.
class Tensor {
 public:
  /// Undefined handle: numel() is 0 and no data is attached.
  Tensor();
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor identity(std::size_t n, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t rows() const;  // extent 0 of a matrix
  std::size_t cols() const;  // extent 1 of a matrix

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double at(std::size_t i) const { return data()[i]; }
  double at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Reverse-mode sweep from this scalar. Populates grad() of every
  /// requires_grad tensor reachable from it. The graph is released afterwards,
  /// so a second call on the same loss is a ContractError.
  void backward();

  /// Copy of the values as a fresh leaf, detached from any graph.
  Tensor detach() const;
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

/// True while ops record graph edges on this thread.
bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

// Builds the result node of an op. Parents are attached only when gradient
// recording is on and at least one input requires a gradient.
Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs, std::function<void(Node&)> backward);

}  // namespace detail

}  // namespace dimple
