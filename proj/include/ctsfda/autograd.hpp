#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "ctsfda/tensor.hpp"

namespace ctsfda {

// Reverse-mode autodiff over dense tensors. The graph is built eagerly;
// each node stores a closure that scatters its output gradient to its
// parents. Gradients are only propagated into nodes with requires_grad.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backprop;  // may be empty (leaf)

  Tensor<T>& ensure_grad() {
    if (grad.shape != value.shape) grad = Tensor<T>::zeros(value.shape);
    return grad;
  }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_leaf(Tensor<T> value, bool requires_grad = false) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  return n;
}

// Backpropagate from a scalar root. Gradients accumulate into ensure_grad()
// of every reachable node that requires_grad.
template <typename T>
void backward(const Var<T>& root) {
  if (root->value.size() != 1)
    throw ShapeError("backward: root must be a scalar");
  // Topological order via iterative post-order DFS.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* p = node->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad.data[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop && (*it)->requires_grad) (*it)->backprop();
}

// ---- elementwise / structural ops ----

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a->value, b->value, "add");
  Tensor<T> out = a->value;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
  auto n = make_op(std::move(out), {a, b});
  Node<T>* np = n.get();
  n->backprop = [np, a, b]() {
    for (auto& p : {a, b})
      if (p->requires_grad) {
        auto& g = p->ensure_grad();
        for (std::int64_t i = 0; i < g.size(); ++i) g[i] += np->grad[i];
      }
  };
  return n;
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a->value, b->value, "sub");
  Tensor<T> out = a->value;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
  auto n = make_op(std::move(out), {a, b});
  Node<T>* np = n.get();
  n->backprop = [np, a, b]() {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] += np->grad[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] -= np->grad[i];
    }
  };
  return n;
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a->value, b->value, "mul");
  Tensor<T> out = a->value;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  auto n = make_op(std::move(out), {a, b});
  Node<T>* np = n.get();
  n->backprop = [np, a, b]() {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (std::int64_t i = 0; i < g.size(); ++i)
        g[i] += np->grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (std::int64_t i = 0; i < g.size(); ++i)
        g[i] += np->grad[i] * a->value[i];
    }
  };
  return n;
}

template <typename T>
Var<T> scale_const(Var<T> a, T c) {
  Tensor<T> out = a->value;
  for (auto& v : out.data) v *= c;
  auto n = make_op(std::move(out), {a});
  Node<T>* np = n.get();
  n->backprop = [np, a, c]() {
    if (!a->requires_grad) return;
    auto& g = a->ensure_grad();
    for (std::int64_t i = 0; i < g.size(); ++i) g[i] += c * np->grad[i];
  };
  return n;
}

// out = s[0] * a, with s a one-element tensor (the trainable scaling factor).
template <typename T>
Var<T> scale_var(Var<T> a, Var<T> s) {
  if (s->value.size() != 1) throw ShapeError("scale_var: scalar expected");
  T c = s->value[0];
  Tensor<T> out = a->value;
  for (auto& v : out.data) v *= c;
  auto n = make_op(std::move(out), {a, s});
  Node<T>* np = n.get();
  n->backprop = [np, a, s, c]() {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] += c * np->grad[i];
    }
    if (s->requires_grad) {
      auto& g = s->ensure_grad();
      T acc = 0;
      for (std::int64_t i = 0; i < np->grad.size(); ++i)
        acc += np->grad[i] * a->value[i];
      g[0] += acc;
    }
  };
  return n;
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = a->value;
  for (auto& v : out.data) v = v > T(0) ? v : T(0);
  auto n = make_op(std::move(out), {a});
  Node<T>* np = n.get();
  n->backprop = [np, a]() {
    if (!a->requires_grad) return;
    auto& g = a->ensure_grad();
    for (std::int64_t i = 0; i < g.size(); ++i)
      if (a->value[i] > T(0)) g[i] += np->grad[i];
  };
  return n;
}

template <typename T>
Var<T> reshape(Var<T> a, Shape s) {
  if (numel(s) != a->value.size())
    throw ShapeError("reshape: element count mismatch");
  Tensor<T> out(std::move(s), a->value.data);
  auto n = make_op(std::move(out), {a});
  Node<T>* np = n.get();
  n->backprop = [np, a]() {
    if (!a->requires_grad) return;
    auto& g = a->ensure_grad();
    for (std::int64_t i = 0; i < g.size(); ++i) g[i] += np->grad[i];
  };
  return n;
}

// Value copy that blocks gradient flow.
template <typename T>
Var<T> detach(const Var<T>& a) {
  return make_leaf(a->value, false);
}

template <typename T>
Var<T> mean_all(Var<T> a) {
  T acc = 0;
  for (T v : a->value.data) acc += v;
  const T inv = T(1) / static_cast<T>(a->value.size());
  Tensor<T> out({1});
  out[0] = acc * inv;
  auto n = make_op(std::move(out), {a});
  Node<T>* np = n.get();
  n->backprop = [np, a, inv]() {
    if (!a->requires_grad) return;
    auto& g = a->ensure_grad();
    for (std::int64_t i = 0; i < g.size(); ++i) g[i] += np->grad[0] * inv;
  };
  return n;
}

template <typename T>
Var<T> add_scalars(Var<T> a, Var<T> b) {
  return add(a, b);
}

}  // namespace ctsfda
