#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dmc/errors.hpp"
#include "dmc/tensor.hpp"

namespace dmc {

class Tape;

// Handle to a tape node. Ops take and return Vars; plain Tensors enter the
// tape through Tape::leaf.
struct Var {
  Tape* tape = nullptr;
  std::int32_t id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
};

// Receives the node id whose grad is populated and accumulates into parents.
using BackwardFn = std::function<void(Tape&, std::int32_t)>;

struct TapeNode {
  Tensor value;
  Tensor grad;  // allocated lazily during backward
  std::vector<std::int32_t> parents;
  BackwardFn backward;  // empty for leaves
  bool requires_grad = false;
  std::string label;
};

// Reverse-mode tape. Nodes are recorded in execution order, so recording
// order is a topological order and parents always precede children; the
// backward sweep walks ids in reverse and accumulates (+=) across fan-out.
class Tape {
 public:
  Var leaf(Tensor value, bool requires_grad = false, std::string label = {}) {
    TapeNode n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.label = std::move(label);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<std::int32_t>(nodes_.size()) - 1};
  }

  Var record(Tensor value, std::vector<std::int32_t> parents, BackwardFn backward,
             std::string label = {}) {
    TapeNode n;
    n.value = std::move(value);
    for (std::int32_t p : parents) {
      if (p < 0 || p >= static_cast<std::int32_t>(nodes_.size())) {
        throw ContractError("Tape::record: parent id out of range");
      }
      n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(p)].requires_grad;
    }
    n.parents = std::move(parents);
    n.backward = std::move(backward);
    n.label = std::move(label);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<std::int32_t>(nodes_.size()) - 1};
  }

  std::int32_t size() const { return static_cast<std::int32_t>(nodes_.size()); }

  const TapeNode& node(std::int32_t id) const { return nodes_.at(static_cast<std::size_t>(id)); }

  const Tensor& value(Var v) const { return node_ref(v.id).value; }
  const Tensor& value(std::int32_t id) const { return node_ref(id).value; }

  bool wants_grad(std::int32_t id) const { return node_ref(id).requires_grad; }

  bool has_grad(Var v) const { return !node_ref(v.id).grad.empty(); }

  const Tensor& grad(Var v) const {
    const TapeNode& n = node_ref(v.id);
    if (n.grad.empty()) {
      throw ContractError("Tape::grad: node " + std::to_string(v.id) +
                          (n.label.empty() ? "" : " (" + n.label + ")") +
                          " has no gradient; run backward first");
    }
    return n.grad;
  }

  // Accumulate g into the node's grad buffer (allocating zeros on first use).
  void add_to_grad(std::int32_t id, const Tensor& g) {
    TapeNode& n = node_ref(id);
    if (!g.same_shape(n.value)) {
      throw ShapeError("Tape::add_to_grad: grad shape " + shape_str(g.shape()) +
                       " vs value shape " + shape_str(n.value.shape()));
    }
    if (n.grad.empty()) {
      n.grad = g;
      return;
    }
    double* d = n.grad.data();
    const double* s = g.data();
    for (std::int64_t i = 0; i < g.size(); ++i) d[i] += s[i];
  }

  Tensor& grad_buffer(std::int32_t id) {
    TapeNode& n = node_ref(id);
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  // Reverse sweep from a scalar loss node. Deterministic: node order is the
  // recording order and every accumulation is a plain +=.
  void backward(Var loss) {
    if (loss.tape != this) throw ContractError("Tape::backward: foreign Var");
    TapeNode& ln = node_ref(loss.id);
    if (ln.value.size() != 1) {
      throw ContractError("Tape::backward: loss must be scalar (shape all ones), got " +
                          shape_str(ln.value.shape()));
    }
    Tensor seed(ln.value.shape());
    seed[0] = 1.0;
    add_to_grad(loss.id, seed);
    for (std::int32_t i = loss.id; i >= 0; --i) {
      TapeNode& n = nodes_[static_cast<std::size_t>(i)];
      if (n.grad.empty() || !n.backward || !n.requires_grad) continue;
      n.backward(*this, i);
    }
  }

  // First node (in recording order) holding a non-finite value, for
  // diagnosing where a NaN/Inf entered the computation.
  std::optional<std::string> first_nonfinite() const {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!all_finite(nodes_[i].value)) {
        return nodes_[i].label.empty() ? "node " + std::to_string(i) : nodes_[i].label;
      }
    }
    return std::nullopt;
  }

 private:
  TapeNode& node_ref(std::int32_t id) {
    if (id < 0 || id >= size()) throw ContractError("Tape: node id out of range");
    return nodes_[static_cast<std::size_t>(id)];
  }
  const TapeNode& node_ref(std::int32_t id) const {
    if (id < 0 || id >= size()) throw ContractError("Tape: node id out of range");
    return nodes_[static_cast<std::size_t>(id)];
  }

  std::vector<TapeNode> nodes_;
};

}  // namespace dmc
