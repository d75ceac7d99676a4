#include "leproto/autograd.hpp"

#include <algorithm>
#include <unordered_set>

namespace leproto {

void Node::accumulate(const Tensor& g) {
  if (grad.empty()) {
    grad = g;
    if (grad.shape() != value.shape()) grad = g.reshaped(value.shape());
    return;
  }
  if (g.size() != grad.size()) throw ShapeError("gradient size mismatch during accumulation");
  auto dst = grad.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

void Var::zero_grad() {
  if (node_) node_->grad = Tensor();
}

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Var leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return Var(std::move(n));
}

namespace {
bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace

NoGradGuard::NoGradGuard() : previous_(grad_mode()) { grad_mode() = false; }
NoGradGuard::~NoGradGuard() { grad_mode() = previous_; }
bool NoGradGuard::grad_enabled() { return grad_mode(); }

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool needs = grad_mode() && std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p.requires_grad(); });
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Var(std::move(n));
}

void backward(const Var& root) {
  if (!root.defined()) throw std::invalid_argument("backward on undefined var");
  if (root.value().size() != 1) throw ShapeError("backward root must be a scalar");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS; reversed order is a valid topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(Tensor(root.value().shape(), 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Intermediate gradients are no longer needed; leaves keep theirs.
  for (Node* n : order) {
    if (n->backward_fn) n->grad = Tensor();
  }
}

void KinkMonitor::record(std::uint64_t decision, double gap) {
  if (!enabled) return;
  signature.push_back(decision);
  if (gap < min_gap) min_gap = gap;
}

KinkMonitor& KinkMonitor::current() {
  thread_local KinkMonitor monitor;
  return monitor;
}

ScopedKinkMonitor::ScopedKinkMonitor() {
  auto& m = KinkMonitor::current();
  previous_ = m.enabled;
  m.enabled = true;
  m.reset();
}

ScopedKinkMonitor::~ScopedKinkMonitor() { KinkMonitor::current().enabled = previous_; }

}  // namespace leproto
