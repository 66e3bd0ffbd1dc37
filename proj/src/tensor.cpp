// SPDX-License-Identifier: Apache-2.0
#include "dimple/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "dimple/errors.hpp"

namespace dimple {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::vector<double>& detail::Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  for (auto extent : shape) {
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_to_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_to_string(shape) + " needs " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }
Tensor Tensor::ones(Shape shape, bool requires_grad) { return full(std::move(shape), 1.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor(Shape{}, {value}, requires_grad); }

Tensor Tensor::identity(std::size_t n, bool requires_grad) {
  std::vector<double> values(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) values[i * n + i] = 1.0;
  return Tensor({n, n}, std::move(values), requires_grad);
}

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

const Shape& Tensor::shape() const {
  static const Shape kUndefined;
  return node_ ? node_->shape : kUndefined;
}
std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::size_t Tensor::rows() const {
  if (dim() != 2) throw DimensionError("expected a matrix, got shape " + shape_to_string(shape()));
  return shape()[0];
}

std::size_t Tensor::cols() const {
  if (dim() != 2) throw DimensionError("expected a matrix, got shape " + shape_to_string(shape()));
  return shape()[1];
}

std::span<const double> Tensor::data() const { return node_ ? std::span<const double>(node_->data) : std::span<const double>(); }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_to_string(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_ ? std::span<const double>(node_->grad) : std::span<const double>(); }
void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(shape(), node_->data, false); }

void Tensor::backward() {
  if (numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_to_string(shape()));
  }
  if (node_->backward_done) throw ContractError("backward() already called on this loss");
  if (!node_->requires_grad) throw ContractError("backward() on a tensor that is not part of a gradient graph");

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
  // Release the graph; intermediate gradients are no longer needed.
  for (detail::Node* node : order) {
    if (node->backward) {
      node->backward = nullptr;
      node->parents.clear();
      if (node != node_.get()) node->grad.clear();
    }
  }
  node_->backward_done = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor detail::make_result(const char* op, Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                           std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->shape = std::move(shape);
  node->data = std::move(values);
  if (g_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (auto& t : inputs) node->parents.push_back(t.node());
      node->backward = std::move(backward);
    }
  }
  return Tensor::from_node(std::move(node));
}

}  // namespace dimple
