#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "v2vbeam/errors.hpp"

namespace v2vbeam {

namespace detail {

// One entry on the implicit tape: either a leaf (parameter/input) or the
// output of an executed operation. Nodes are created in execution order, so
// parent links always point backwards in time and a reverse traversal from
// the loss visits inputs after their consumers.
struct TapeNode {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TapeNode>> parents;
  std::function<void(TapeNode&)> backward_fn;
  std::uint64_t visit_mark = 0;

  std::size_t numel() const { return value.size(); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

std::string shape_to_string(const std::vector<int>& shape);

// Dense row-major tensor of doubles with an optional gradient slot. Tensor is
// a cheap handle: copies share the underlying node (and therefore the value
// and gradient buffers).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double v, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
  int numel() const { return static_cast<int>(node_->numel()); }

  double* data() { return node_->value.data(); }
  const double* data() const { return node_->value.data(); }
  std::vector<double>& values() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  bool has_grad() const { return node_->grad.size() == node_->numel(); }
  double* grad() { node_->ensure_grad(); return node_->grad.data(); }
  const std::vector<double>& grad_values() const;
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  // Scalar access; throws unless numel() == 1.
  double item() const;

  double at2(int i, int j) const {
    return node_->value[static_cast<std::size_t>(i) * node_->shape[1] + j];
  }

  detail::TapeNode* node() const { return node_.get(); }
  const std::shared_ptr<detail::TapeNode>& shared_node() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::TapeNode> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::TapeNode> node_;
};

// Reverse-mode sweep from a scalar loss: every tensor on the tape that
// requires a gradient receives dLoss/dTensor in its grad buffer. Repeated
// calls without zeroing accumulate.
void backward(const Tensor& loss);

}  // namespace v2vbeam
