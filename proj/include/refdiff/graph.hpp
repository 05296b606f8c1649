#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "refdiff/tensor.hpp"

namespace refdiff {

// Reverse-mode tape. Append-only: record order is the topological order, and
// backward() visits nodes in strict reverse record order, so gradient
// accumulation is deterministic (two runs on identical graphs are bit-identical).
// A graph is confined to one logical thread.
template <typename S>
class GraphT {
public:
    struct Node {
        TensorT<S> value;
        TensorT<S> grad;  // allocated on demand during backward
        std::function<void(GraphT&)> backprop;
        bool needs_grad = false;
        bool grad_ready = false;
    };

    int input(TensorT<S> t, bool needs_grad = true) {
        Node n;
        n.value      = std::move(t);
        n.needs_grad = needs_grad;
        nodes_.push_back(std::move(n));
        return int(nodes_.size()) - 1;
    }

    int constant(TensorT<S> t) { return input(std::move(t), false); }

    int emit(TensorT<S> value, bool needs_grad) {
        Node n;
        n.value      = std::move(value);
        n.needs_grad = needs_grad;
        nodes_.push_back(std::move(n));
        return int(nodes_.size()) - 1;
    }

    void set_backprop(int id, std::function<void(GraphT&)> fn) { nodes_[size_t(id)].backprop = std::move(fn); }

    const TensorT<S>& value(int id) const { return nodes_[size_t(id)].value; }
    TensorT<S>& value(int id) { return nodes_[size_t(id)].value; }

    bool needs_grad(int id) const { return nodes_[size_t(id)].needs_grad; }

    // Accumulation buffer for a node's adjoint; zero-initialized on first touch.
    TensorT<S>& grad_buf(int id) {
        Node& n = nodes_[size_t(id)];
        if (!n.grad_ready) {
            n.grad       = TensorT<S>::zeros(n.value.shape);
            n.grad_ready = true;
        }
        return n.grad;
    }

    const TensorT<S>& grad(int id) const { return nodes_[size_t(id)].grad; }
    bool has_grad(int id) const { return nodes_[size_t(id)].grad_ready; }

    // Seeds d(loss)/d(loss) = 1 and sweeps the tape backwards.
    void backward(int loss_id) {
        if (value(loss_id).numel() != 1)
            throw dimension_error("backward expects a scalar node, got shape " + shape_str(value(loss_id).shape));
        grad_buf(loss_id)[0] = S(1);
        for (int i = loss_id; i >= 0; --i) {
            Node& n = nodes_[size_t(i)];
            if (n.needs_grad && n.grad_ready && n.backprop) n.backprop(*this);
        }
    }

    size_t size() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
};

// Lightweight handle: a node id bound to its graph.
template <typename S>
struct VarT {
    GraphT<S>* g = nullptr;
    int id       = -1;

    VarT() = default;
    VarT(GraphT<S>& graph, int node) : g(&graph), id(node) {}

    bool valid() const { return g != nullptr && id >= 0; }
    const TensorT<S>& val() const { return g->value(id); }
    const Shape& shape() const { return g->value(id).shape; }
    bool needs_grad() const { return g->needs_grad(id); }
};

using Graph   = GraphT<float>;
using Graph64 = GraphT<double>;
using Var     = VarT<float>;
using Var64   = VarT<double>;

}  // namespace refdiff
