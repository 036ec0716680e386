#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "frami/error.hpp"

namespace frami {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

// One vertex of the recorded graph. `backward` reads this node's grad and
// accumulates into the grads of `parents`.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return parents.empty(); }
  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape.empty()) shape = {1};
    for (auto d : shape)
      if (d == 0) throw ShapeError("zero-sized dimension in " + frami::to_string(shape));
    if (numel(shape) != values.size())
      throw ShapeError("shape " + frami::to_string(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return Tensor(shape, std::vector<double>(numel(shape), 0.0), requires_grad);
  }
  static Tensor full(const Shape& shape, double v, bool requires_grad = false) {
    return Tensor(shape, std::vector<double>(numel(shape), v), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> values() const& { return node_->value; }
  std::vector<double> values() const&& { return node_->value; }
  // Direct mutation is reserved for leaves (parameters, inputs).
  std::span<double> mutable_values() {
    if (!node_->is_leaf()) throw ContractError("cannot mutate a non-leaf tensor");
    return node_->value;
  }
  double operator[](std::size_t i) const { return node_->value[i]; }

  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + frami::to_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) {
    if (!node_->is_leaf()) throw ContractError("requires_grad can only be set on leaves");
    node_->requires_grad = rg;
  }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const double> grad() const& { return node_->grad; }
  std::vector<double> grad() const&& { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  // Same values, cut from the graph.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

struct Parameter {
  std::string name;
  Tensor tensor;
};

namespace detail {

// Builds a result node. The backward rule is recorded only when some
// parent requires a gradient.
inline Tensor make_result(Shape shape, std::vector<double> values,
                          std::vector<Tensor> parents, std::function<void(Node&)> backward) {
  Tensor out(std::move(shape), std::move(values), false);
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  if (rg) {
    auto& node = *out.node();
    node.requires_grad = true;
    node.parents.reserve(parents.size());
    for (auto& p : parents) node.parents.push_back(p.node());
    node.backward = std::move(backward);
  }
  return out;
}

// Grad buffer of parent i, or nullptr when that parent needs none.
inline double* parent_grad(Node& self, std::size_t i) {
  auto& p = *self.parents[i];
  return p.requires_grad ? p.ensure_grad().data() : nullptr;
}

}  // namespace detail

// Accumulates d(loss)/d(leaf) into every reachable leaf requiring a gradient.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward requires a scalar loss");
  if (!loss.requires_grad()) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order)
    if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
  loss.node()->ensure_grad()[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->is_leaf()) continue;
    n->backward(*n);
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

}  // namespace frami
