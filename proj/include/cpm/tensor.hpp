// Dense tensors plus a minimal reverse-mode autodiff tape.
//
// Nodes carry shared ownership of their parents, so a Tensor handle keeps the
// whole subgraph alive. backward() walks reachable nodes in reverse creation
// order (ids are monotone, parents precede children, hence topological),
// accumulates into parent grads, then frees the interior of the graph and
// marks it consumed: a second backward through any part of it is an error.
//
// Graph construction is single-threaded per step (thread_local id counter and
// grad-mode flag); finished tensors are immutable and safe to hand off.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cpm/common.hpp"

namespace cpm {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "(";
  for (std::size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
  return r + ")";
}

namespace autodiff_detail {
inline thread_local std::uint64_t g_next_id = 1;
inline thread_local int g_no_grad_depth = 0;
}  // namespace autodiff_detail

inline bool grad_enabled() { return autodiff_detail::g_no_grad_depth == 0; }

// RAII: ops executed inside the scope compute values but record no tape.
struct NoGradScope {
  NoGradScope() { ++autodiff_detail::g_no_grad_depth; }
  ~NoGradScope() { --autodiff_detail::g_no_grad_depth; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;
};

template <class Real>
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // allocated lazily during backward / for leaves
  bool requires_grad = false;
  bool consumed = false;
  std::string op = "leaf";
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // reads this->grad, accumulates into parents

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
  }
};

template <class Real>
void check_finite(const std::vector<Real>& v, const std::string& op) {
  for (const Real x : v)
    if (!std::isfinite(static_cast<double>(x)))
      throw Error("non-finite value produced by op '" + op + "'");
}

template <class Real>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<Real>> n) : n_(std::move(n)) {}

  static Tensor leaf(Shape shape, std::vector<Real> values, bool requires_grad = false) {
    CPM_CHECK(numel(shape) == values.size(), "tensor: value count does not match shape");
    auto n = std::make_shared<Node<Real>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad && grad_enabled();
    n->id = autodiff_detail::g_next_id++;
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<Real> v(numel(shape), Real(0));
    return leaf(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar(Real x, bool requires_grad = false) {
    return leaf({1}, {x}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(n_); }
  Node<Real>& node() const { return *n_; }
  const std::shared_ptr<Node<Real>>& node_ptr() const { return n_; }
  const Shape& shape() const { return n_->shape; }
  std::size_t size() const { return n_->value.size(); }
  const std::vector<Real>& values() const { return n_->value; }
  std::vector<Real>& values_mut() { return n_->value; }
  const std::vector<Real>& grad() const { return n_->grad; }
  bool requires_grad() const { return n_->requires_grad; }

  Real item() const {
    CPM_CHECK(n_->value.size() == 1, "item(): tensor is not scalar");
    return n_->value[0];
  }

  void zero_grad() { n_->grad.assign(n_->value.size(), Real(0)); }

  // Reverse-mode sweep from a scalar root. Frees interior tape state afterwards.
  void backward() const {
    CPM_CHECK(n_, "backward: undefined tensor");
    CPM_CHECK(n_->value.size() == 1, "backward: loss must be a scalar");
    CPM_CHECK(!n_->consumed, "backward: graph already consumed");

    // Gather the reachable subgraph (holding strong refs so cleanup below
    // cannot free a node mid-sweep), then order by descending creation id.
    std::vector<std::shared_ptr<Node<Real>>> order;
    std::vector<std::shared_ptr<Node<Real>>> stack{n_};
    std::vector<const Node<Real>*> seen;
    auto mark = [&](const Node<Real>* p) {
      for (auto* q : seen)
        if (q == p) return false;
      seen.push_back(p);
      return true;
    };
    // A vector-scan visited set is quadratic; fine for graphs of a few
    // thousand nodes but switch to a hash set if encoders grow.
    while (!stack.empty()) {
      auto cur = stack.back();
      stack.pop_back();
      if (!mark(cur.get())) continue;
      CPM_CHECK(!cur->consumed || cur.get() == n_.get(),
                "backward: graph already consumed");
      for (auto& p : cur->parents) stack.push_back(p);
      order.push_back(std::move(cur));
    }
    std::sort(order.begin(), order.end(),
              [](const auto& a, const auto& b) { return a->id > b->id; });

    n_->ensure_grad();
    n_->grad[0] += Real(1);
    for (auto& nd : order) {
      if (nd->backward_fn && !nd->grad.empty()) nd->backward_fn(*nd);
    }
    // Interior nodes are single-use; leaves stay live across steps and keep
    // their accumulated grads for the optimizer.
    for (auto& nd : order) {
      if (!nd->parents.empty() || nd->backward_fn) {
        nd->consumed = true;
        nd->parents.clear();
        nd->backward_fn = nullptr;
        nd->grad.clear();
        nd->grad.shrink_to_fit();
      }
    }
  }

 private:
  std::shared_ptr<Node<Real>> n_;
};

// Shared constructor for interior nodes. Parents are recorded (and a backward
// fn expected) only when grads are enabled and some input needs them.
template <class Real>
Tensor<Real> make_node(std::string op, Shape shape, std::vector<Real> value,
                       std::vector<std::shared_ptr<Node<Real>>> parents) {
  CPM_CHECK(numel(shape) == value.size(), "make_node: value count does not match shape");
  check_finite(value, op);
  auto n = std::make_shared<Node<Real>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = std::move(op);
  n->id = autodiff_detail::g_next_id++;
  bool need = false;
  if (grad_enabled())
    for (auto& p : parents) need = need || p->requires_grad;
  if (need) {
    n->requires_grad = true;
    n->parents = std::move(parents);
  }
  return Tensor<Real>(std::move(n));
}

}  // namespace cpm
