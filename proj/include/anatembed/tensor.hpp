#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "anatembed/common.hpp"

namespace anatembed::diffcore {

class Tensor;

// One node of the define-by-run tape. Non-leaf nodes carry a backward closure
// that reads this node's grad and accumulates into the parents' grads.
struct Node {
  Shape shape;
  std::vector<float> values;
  std::vector<float> grad;
  bool requires_grad = false;
  std::vector<Tensor> parents;
  std::function<void(Node&)> backward;
  uint64_t seq = 0;
};

inline uint64_t next_seq() {
  static std::atomic<uint64_t> c{0};
  return ++c;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.n_ = std::make_shared<Node>();
    t.n_->values.assign((size_t)anatembed::numel(shape), 0.0f);
    t.n_->shape = std::move(shape);
    t.n_->seq = next_seq();
    return t;
  }

  static Tensor from(Shape shape, std::vector<float> values) {
    require((int64_t)values.size() == anatembed::numel(shape),
            "tensor: value count ", values.size(), " does not match shape ",
            shape_str(shape));
    Tensor t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(shape);
    t.n_->values = std::move(values);
    t.n_->seq = next_seq();
    return t;
  }

  static Tensor scalar(double v) { return from({1}, {(float)v}); }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int64_t size() const { return (int64_t)n_->values.size(); }
  float* data() { return n_->values.data(); }
  const float* data() const { return n_->values.data(); }
  float item() const {
    require(size() == 1, "tensor: item() on non-scalar shape ",
            shape_str(shape()));
    return n_->values[0];
  }

  // Whether gradients flow through this tensor.
  bool tracked() const {
    return n_ && (n_->requires_grad || n_->backward != nullptr);
  }

  Tensor& set_requires_grad(bool v) {
    require(n_->backward == nullptr,
            "tensor: requires_grad can only be toggled on leaves");
    n_->requires_grad = v;
    return *this;
  }
  bool requires_grad() const { return n_->requires_grad; }

  float* grad() {
    if (n_->grad.empty()) n_->grad.assign(n_->values.size(), 0.0f);
    return n_->grad.data();
  }
  const std::vector<float>& grad_vec() const { return n_->grad; }
  bool has_grad() const { return !n_->grad.empty(); }
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0f);
  }

  Node* node() const { return n_.get(); }

  // Builds a new op result node. parents supplies the tape edges; backward
  // may be empty when no parent is tracked.
  static Tensor op(Shape shape, std::vector<float> values,
                   std::vector<Tensor> parents,
                   std::function<void(Node&)> backward) {
    Tensor t = from(std::move(shape), std::move(values));
    bool any_tracked = false;
    for (const Tensor& p : parents) any_tracked |= p.tracked();
    if (any_tracked) {
      t.n_->parents = std::move(parents);
      t.n_->backward = std::move(backward);
    }
    return t;
  }

 private:
  std::shared_ptr<Node> n_;
};

// Reverse-mode sweep from a scalar loss. Nodes are visited exactly once in
// reverse creation order (creation order is a valid topological order because
// ops only consume already-built tensors).
inline void backward(Tensor loss) {
  require(loss.defined() && loss.size() == 1,
          "backward: loss must be a defined scalar");
  std::vector<Node*> nodes;
  std::unordered_set<Node*> seen;
  std::vector<Tensor> stack{loss};
  seen.insert(loss.node());
  while (!stack.empty()) {
    Tensor t = stack.back();
    stack.pop_back();
    nodes.push_back(t.node());
    for (const Tensor& p : t.node()->parents)
      if (p.tracked() && seen.insert(p.node()).second) stack.push_back(p);
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const Node* a, const Node* b) { return a->seq > b->seq; });
  Node* root = loss.node();
  if (root->grad.empty()) root->grad.assign(1, 0.0f);
  root->grad[0] += 1.0f;
  for (Node* n : nodes) {
    if (!n->backward) continue;
    if (n->grad.empty()) n->grad.assign(n->values.size(), 0.0f);
    n->backward(*n);
  }
}

inline float* ensure_grad(Tensor& t) { return t.grad(); }

}  // namespace anatembed::diffcore
