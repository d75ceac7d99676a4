#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "leproto/tensor.hpp"

namespace leproto {

struct Node {
  Tensor value;
  Tensor grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  // Adds g into grad, allocating it on first use.
  void accumulate(const Tensor& g);
  Tensor& grad_buffer();
};

// Handle to a node of the reverse-mode tape. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return node_ != nullptr; }

  void zero_grad();

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
Var leaf(Tensor value, bool requires_grad = true);

// Runs reverse accumulation from a scalar (size-1) root with seed 1.
void backward(const Var& root);

// Builds an op node. backward_fn is attached only when some parent needs a gradient.
Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

// While alive, new op nodes record no parents (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool grad_enabled();

 private:
  bool previous_;
};

// Records the branch taken at every non-smooth point (filter cutoffs, max-pool
// winners) while enabled, plus the smallest distance to a branch boundary.
// The gradient checker uses it to detect when a finite-difference probe
// straddles a kink.
struct KinkMonitor {
  bool enabled = false;
  std::vector<std::uint64_t> signature;
  double min_gap = 1e300;

  void reset() {
    signature.clear();
    min_gap = 1e300;
  }
  void record(std::uint64_t decision, double gap);

  static KinkMonitor& current();
};

class ScopedKinkMonitor {
 public:
  ScopedKinkMonitor();
  ~ScopedKinkMonitor();
  ScopedKinkMonitor(const ScopedKinkMonitor&) = delete;
  ScopedKinkMonitor& operator=(const ScopedKinkMonitor&) = delete;

  const KinkMonitor& monitor() const { return KinkMonitor::current(); }

 private:
  bool previous_;
};

}  // namespace leproto
