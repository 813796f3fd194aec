#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sliceattn/error.hpp"
#include "sliceattn/tensor.hpp"

namespace sliceattn {

class Graph;

// Handle to a node on a Graph tape. Cheap to copy; only valid while the
// graph that produced it is alive and has not run backward().
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }
};

// Reverse-mode tape for one forward pass. Nodes are appended in execution
// order, so parents always precede children; backward() walks the tape once
// in reverse and then releases it.
//
// Leaves created with input()/param() keep a pointer to the caller's Tensor;
// if that tensor has requires_grad set, backward() accumulates into its
// `grad`. The tensor must outlive the backward call.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value) { return push(std::move(value), {}, nullptr, nullptr, false); }

  Var input(Tensor& source) {
    return push(source, {}, nullptr, &source, source.requires_grad);
  }
  Var param(Tensor& source) { return input(source); }

  // Appends an op result. `backward` may be empty for non-differentiable ops;
  // it is dropped when no parent needs a gradient.
  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward) {
    check_live();
    if (!value.all_finite()) {
      throw NumericError("non-finite value produced by forward op (node " +
                         std::to_string(nodes_.size()) + ")");
    }
    bool needs = false;
    for (std::size_t p : parents) {
      if (p >= nodes_.size()) throw ContractError("parent node does not precede child");
      needs = needs || nodes_[p].needs_grad;
    }
    if (!backward) needs = false;
    return push(std::move(value), std::move(parents), needs ? std::move(backward) : nullptr,
                nullptr, needs);
  }

  const Tensor& value(std::size_t id) const {
    check_live();
    return nodes_.at(id).value;
  }
  const Tensor& value(Var v) const { return value(v.id); }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool released() const { return released_; }

  // Gradient arriving at node `id` during backward (length == numel).
  std::span<const double> grad_out(std::size_t id) const { return grads_.at(id); }

  // Accumulation buffer for a parent, or nullptr when it needs no gradient.
  double* grad_in(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.needs_grad) return nullptr;
    std::vector<double>& g = grads_.at(id);
    if (g.empty()) g.assign(n.value.numel(), 0.0);
    return g.data();
  }

  void backward(Var loss) {
    check_live();
    if (loss.graph != this) throw ContractError("backward: loss belongs to another graph");
    const Tensor& lv = value(loss);
    if (lv.numel() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " + shape_str(lv.shape()));
    }
    grads_.assign(nodes_.size(), {});
    if (nodes_[loss.id].needs_grad) grads_[loss.id].assign(1, 1.0);

    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || grads_[i].empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.source != nullptr && n.source->requires_grad) {
        std::vector<double>& dst = n.source->ensure_grad();
        const std::vector<double>& g = grads_[i];
        for (std::size_t k = 0; k < g.size(); ++k) dst[k] += g[k];
      }
      grads_[i].clear();
      grads_[i].shrink_to_fit();
    }
    nodes_.clear();
    grads_.clear();
    released_ = true;
  }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    Tensor* source = nullptr;
    bool needs_grad = false;
  };

  Var push(Tensor value, std::vector<std::size_t> parents, BackwardFn backward, Tensor* source,
           bool needs_grad) {
    check_live();
    value.requires_grad = false;
    value.grad.reset();
    nodes_.push_back(Node{std::move(value), std::move(parents), std::move(backward), source,
                          needs_grad});
    return Var{this, nodes_.size() - 1};
  }

  void check_live() const {
    if (released_) throw ContractError("graph tape already released by backward()");
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  bool released_ = false;
};

inline const Tensor& Var::value() const {
  if (graph == nullptr) throw ContractError("Var is not attached to a graph");
  return graph->value(id);
}

inline void backward(Var loss) {
  if (loss.graph == nullptr) throw ContractError("backward on detached Var");
  loss.graph->backward(loss);
}

}  // namespace sliceattn
