#include "v2vbeam/tensor.hpp"

#include <atomic>
#include <sstream>
#include <utility>

namespace v2vbeam {

std::string shape_to_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace {

std::size_t checked_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    if (e <= 0) {
      throw DimensionError("tensor extents must be positive, got " + shape_to_string(shape));
    }
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

}  // namespace

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto node = std::make_shared<detail::TapeNode>();
  node->value.assign(checked_numel(shape), 0.0);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::full(std::vector<int> shape, double v, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.node()->value.begin(), t.node()->value.end(), v);
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
  if (checked_numel(shape) != data.size()) {
    throw DimensionError("data size " + std::to_string(data.size()) +
                         " does not match shape " + shape_to_string(shape));
  }
  auto node = std::make_shared<detail::TapeNode>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

double Tensor::item() const {
  if (node_->numel() != 1) {
    throw DimensionError("item() requires a scalar tensor, got shape " +
                         shape_to_string(node_->shape));
  }
  return node_->value[0];
}

const std::vector<double>& Tensor::grad_values() const {
  if (!has_grad()) {
    throw ValidationError("tensor has no gradient; run backward() first");
  }
  return node_->grad;
}

namespace {

std::atomic<std::uint64_t> g_backward_pass{1};

}  // namespace

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ValidationError("backward() requires a scalar loss tensor");
  }
  const std::uint64_t pass = g_backward_pass.fetch_add(1, std::memory_order_relaxed);

  // Iterative post-order DFS over parents; the resulting list is a
  // topological order (inputs before consumers), walked in reverse so every
  // node is visited exactly once.
  std::vector<detail::TapeNode*> topo;
  std::vector<std::pair<detail::TapeNode*, std::size_t>> stack;
  detail::TapeNode* root = loss.node();
  if (!root->requires_grad) return;  // loss does not depend on any parameter
  root->visit_mark = pass;
  stack.emplace_back(root, 0);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::TapeNode* parent = node->parents[next++].get();
      if (parent->requires_grad && parent->visit_mark != pass) {
        parent->visit_mark = pass;
        stack.emplace_back(parent, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    detail::TapeNode* node = *it;
    if (node->backward_fn && !node->grad.empty()) {
      node->backward_fn(*node);
    }
  }
}

}  // namespace v2vbeam
