#pragma once

#include <deque>
#include <functional>
#include <stdexcept>
#include <vector>

#include "qgn/tensor.hpp"

namespace qgn {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid until the tape is reset.
struct Value {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& val() const;
  const Tensor& grad() const;
  const std::vector<int>& shape() const { return val().shape(); }
};

/// Define-by-run reverse-mode autodiff tape. Forward ops append nodes with a
/// backward closure; backward() replays the closures in reverse order.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  Value leaf(Tensor v, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(v), Tensor{}, nullptr, requires_grad && grad_enabled_});
    return Value{this, static_cast<int>(nodes_.size()) - 1};
  }

  Value constant(Tensor v) { return leaf(std::move(v), false); }

  /// Appends an op output node. `back` is only stored when gradients are both
  /// globally enabled and needed (some parent requires grad).
  Value emit(Tensor out, const std::vector<Value>& parents, std::function<void()> back) {
    bool need = false;
    if (grad_enabled_) {
      for (const Value& p : parents) {
        if (p.tape != this) throw std::logic_error("Tape::emit: parent from another tape");
        if (nodes_[static_cast<size_t>(p.id)].requires_grad) need = true;
      }
    }
    nodes_.push_back(Node{std::move(out), Tensor{}, need ? std::move(back) : nullptr, need});
    return Value{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  Tensor& value_mut(int id) { return nodes_[static_cast<size_t>(id)].value; }

  bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

  /// Gradient buffer for a node, allocated (zeroed) on first touch.
  Tensor& grad(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  /// Accumulates `g` into the gradient of node `id` if that node wants one.
  void accumulate(int id, const Tensor& g) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad) return;
    Tensor& dst = grad(id);
    const int64_t m = dst.numel();
    for (int64_t i = 0; i < m; ++i) dst[i] += g[i];
  }

  void backward(Value root) {
    if (root.tape != this) throw std::logic_error("Tape::backward: foreign value");
    if (!grad_enabled_) throw std::logic_error("Tape::backward: gradients disabled");
    Node& r = nodes_[static_cast<size_t>(root.id)];
    if (r.value.numel() != 1) throw std::logic_error("Tape::backward: root must be scalar");
    grad(root.id).fill(0.0);
    grad(root.id)[0] = 1.0;
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.back && !n.grad.empty()) n.back();
    }
  }

  size_t size() const { return nodes_.size(); }

  /// Drops all nodes but keeps vector capacity for the next step.
  void reset() { nodes_.clear(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void()> back;
    bool requires_grad = false;
  };

  // Deque keeps references from value()/grad() stable while new nodes are
  // appended mid-expression; callers routinely hold a .val() reference across
  // further op calls.
  std::deque<Node> nodes_;
  bool grad_enabled_;
};

inline const Tensor& Value::val() const { return tape->value(id); }
inline const Tensor& Value::grad() const { return const_cast<Tape*>(tape)->grad(id); }

}  // namespace qgn
