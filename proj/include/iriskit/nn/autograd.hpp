#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "iriskit/nn/tensor.hpp"

namespace iriskit::nn {

// Reverse-mode autodiff over a dynamically recorded graph. Every operation in
// ops.hpp produces a node holding its value, its parents and a closure that
// pushes the node's gradient into the parents' gradients.

template <typename T>
struct NodeT {
    TensorT<T> value;
    TensorT<T> grad; // empty until backward reaches this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<NodeT<T>>> parents;
    std::function<void()> backprop; // empty for leaves

    bool has_grad() const { return !grad.values().empty(); }

    void ensure_grad() {
        if (!has_grad()) grad = TensorT<T>::zeros(value.shape());
    }

    void zero_grad() {
        ensure_grad();
        grad.fill(T(0));
    }
};

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
} // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording in scope; forwards run leaf-only (inference mode).
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Value handle into the recorded graph.
template <typename T>
class VarT {
public:
    VarT() = default;
    explicit VarT(std::shared_ptr<NodeT<T>> node) : node_(std::move(node)) {}

    static VarT leaf(TensorT<T> value, bool requires_grad = false) {
        auto node = std::make_shared<NodeT<T>>();
        node->value = std::move(value);
        node->requires_grad = requires_grad && grad_enabled();
        return VarT(std::move(node));
    }

    bool defined() const { return node_ != nullptr; }
    const std::shared_ptr<NodeT<T>>& node() const { return node_; }

    TensorT<T>& tensor() { return node_->value; }
    const TensorT<T>& tensor() const { return node_->value; }
    const std::vector<int>& shape() const { return node_->value.shape(); }

    bool requires_grad() const { return node_ && node_->requires_grad; }

    const TensorT<T>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }

    void zero_grad() {
        if (node_) node_->zero_grad();
    }

private:
    std::shared_ptr<NodeT<T>> node_;
};

using Var = VarT<float>;

// Builds an op node. When grad recording is off (or no parent needs a
// gradient) the result degenerates to a leaf and the closure is dropped.
template <typename T>
VarT<T> make_op(TensorT<T> value, std::vector<VarT<T>> parents,
                const std::function<std::function<void()>(NodeT<T>*)>& make_backprop) {
    bool needs = false;
    if (grad_enabled()) {
        for (const auto& p : parents) {
            if (p.requires_grad()) {
                needs = true;
                break;
            }
        }
    }
    auto node = std::make_shared<NodeT<T>>();
    node->value = std::move(value);
    if (needs) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (auto& p : parents) node->parents.push_back(p.node());
        node->backprop = make_backprop(node.get());
    }
    return VarT<T>(std::move(node));
}

// Accumulates loss gradients into every reachable node that requires one.
// The loss must be a scalar produced by recorded operations.
template <typename T>
void backward(const VarT<T>& loss) {
    if (!loss.defined()) throw ValueError("backward: undefined loss");
    if (loss.tensor().size() != 1) {
        throw ValueError("backward: loss must be a scalar, got shape " +
                         loss.tensor().shape_string());
    }
    NodeT<T>* root = loss.node().get();
    if (root->parents.empty()) {
        throw StateError("backward: no forward graph recorded for the loss");
    }

    // Iterative post-order over parents; reversed it yields a valid
    // reverse-topological schedule.
    std::vector<NodeT<T>*> order;
    std::unordered_set<NodeT<T>*> visited;
    std::vector<std::pair<NodeT<T>*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            NodeT<T>* parent = node->parents[idx++].get();
            if (parent->requires_grad && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->zero_grad();
    root->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT<T>* node = *it;
        if (node->backprop && node->has_grad()) node->backprop();
    }
}

} // namespace iriskit::nn
