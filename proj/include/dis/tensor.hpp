#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dis/errors.hpp"

namespace dis {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape)
{
    Index n = 1;
    for (Index extent : shape) {
        n *= extent;
    }
    return n;
}

inline std::string to_string(const Shape& shape)
{
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? ", " : "") << shape[i];
    }
    out << ']';
    return out.str();
}

namespace detail {
inline thread_local bool grad_enabled = true;
}

/// Disables graph recording for the lifetime of the guard (sampling, evaluation).
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// One vertex of the differentiation graph. `backward` reads `grad` and
/// accumulates into the gradients of `inputs`.
template <typename Scalar>
struct Node {
    Shape shape;
    std::vector<Scalar> value;
    std::vector<Scalar> grad;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;
    bool requires_grad = false;
};

/// Dense row-major tensor. The scalar type is part of the type, so float
/// training tensors and double verification tensors cannot be mixed.
template <typename Scalar>
class Tensor {
public:
    using scalar_type = Scalar;
    using NodePtr = std::shared_ptr<Node<Scalar>>;

    Tensor() = default;

    Tensor(Shape shape, std::vector<Scalar> values) : node_(std::make_shared<Node<Scalar>>())
    {
        for (Index extent : shape) {
            if (extent < 0) {
                throw ShapeError("negative extent in shape " + dis::to_string(shape));
            }
        }
        if (dis::numel(shape) != static_cast<Index>(values.size())) {
            throw ShapeError("shape " + dis::to_string(shape) + " needs " + std::to_string(dis::numel(shape)) +
                             " values, got " + std::to_string(values.size()));
        }
        node_->shape = std::move(shape);
        node_->value = std::move(values);
    }

    static Tensor full(Shape shape, Scalar fill)
    {
        const auto n = static_cast<std::size_t>(dis::numel(shape));
        return Tensor(std::move(shape), std::vector<Scalar>(n, fill));
    }
    static Tensor zeros(Shape shape) { return full(std::move(shape), Scalar(0)); }
    static Tensor ones(Shape shape) { return full(std::move(shape), Scalar(1)); }
    static Tensor scalar(Scalar v) { return Tensor(Shape{}, std::vector<Scalar>{v}); }

    /// Leaf that collects gradients.
    static Tensor parameter(Shape shape, std::vector<Scalar> values)
    {
        Tensor t(std::move(shape), std::move(values));
        t.node_->requires_grad = true;
        return t;
    }

    static Tensor from_node(NodePtr node)
    {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    Index rank() const { return static_cast<Index>(node_->shape.size()); }
    Index numel() const { return static_cast<Index>(node_->value.size()); }

    Index dim(Index axis) const
    {
        const Index r = rank();
        const Index a = axis < 0 ? axis + r : axis;
        if (a < 0 || a >= r) {
            throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + dis::to_string(shape()));
        }
        return node_->shape[static_cast<std::size_t>(a)];
    }

    std::span<const Scalar> values() const& { return node_->value; }
    std::span<const Scalar> values() const&& = delete; // would dangle in range-for
    const Scalar* data() const { return node_->value.data(); }

    /// Direct write access. Only for leaves outside any live graph
    /// (optimizer updates, checkpoint loading, test fixtures).
    std::span<Scalar> mutable_values() { return node_->value; }

    Scalar item() const
    {
        if (numel() != 1) {
            throw ShapeError("item() on tensor of shape " + dis::to_string(shape()));
        }
        return node_->value[0];
    }

    Scalar at(std::initializer_list<Index> index) const
    {
        if (static_cast<Index>(index.size()) != rank()) {
            throw ShapeError("index rank mismatch for shape " + dis::to_string(shape()));
        }
        Index flat = 0;
        std::size_t axis = 0;
        for (Index i : index) {
            const Index extent = node_->shape[axis++];
            if (i < 0 || i >= extent) {
                throw ShapeError("index out of range for shape " + dis::to_string(shape()));
            }
            flat = flat * extent + i;
        }
        return node_->value[static_cast<std::size_t>(flat)];
    }

    bool requires_grad() const { return node_ && node_->requires_grad; }

    /// Gradient from the most recent backward pass; zeros if none reached this tensor.
    Tensor grad() const
    {
        if (node_->grad.size() == node_->value.size()) {
            return Tensor(node_->shape, node_->grad);
        }
        return zeros(node_->shape);
    }

    Tensor detach() const { return Tensor(node_->shape, node_->value); }

    const NodePtr& node() const { return node_; }

private:
    NodePtr node_;
};

namespace detail {

/// Wraps a freshly computed value; attaches it to the graph when any input
/// requires gradients and recording is enabled.
template <typename Scalar, typename Backward>
Tensor<Scalar> make_result(Shape shape, std::vector<Scalar> value,
                           std::initializer_list<const Tensor<Scalar>*> inputs, Backward&& backward)
{
    auto node = std::make_shared<Node<Scalar>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool needs_grad = false;
    if (grad_enabled) {
        for (const auto* input : inputs) {
            needs_grad = needs_grad || input->requires_grad();
        }
    }
    if (needs_grad) {
        node->requires_grad = true;
        for (const auto* input : inputs) {
            node->inputs.push_back(input->node());
        }
        node->backward = std::forward<Backward>(backward);
    }
    return Tensor<Scalar>::from_node(std::move(node));
}

template <typename Scalar>
Tensor<Scalar> make_result_n(Shape shape, std::vector<Scalar> value, const std::vector<Tensor<Scalar>>& inputs,
                             std::function<void(Node<Scalar>&)> backward)
{
    auto node = std::make_shared<Node<Scalar>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool needs_grad = false;
    if (grad_enabled) {
        for (const auto& input : inputs) {
            needs_grad = needs_grad || input.requires_grad();
        }
    }
    if (needs_grad) {
        node->requires_grad = true;
        for (const auto& input : inputs) {
            node->inputs.push_back(input.node());
        }
        node->backward = std::move(backward);
    }
    return Tensor<Scalar>::from_node(std::move(node));
}

/// Gradient buffer of input `i`, or nullptr when that input takes no gradient.
template <typename Scalar>
Scalar* input_grad(Node<Scalar>& node, std::size_t i)
{
    auto& input = *node.inputs[i];
    return input.requires_grad ? input.grad.data() : nullptr;
}

} // namespace detail

/// Runs reverse-mode differentiation from a scalar loss. Gradients accumulate
/// additively across fan-out; the recorded graph is consumed afterwards.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss)
{
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward needs a scalar loss, got shape " +
                            (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) {
        return;
    }

    // Iterative post-order DFS gives a topological order (inputs before users).
    using NodePtr = std::shared_ptr<Node<Scalar>>;
    std::vector<NodePtr> order;
    std::unordered_set<const Node<Scalar>*> visited;
    std::vector<std::pair<NodePtr, std::size_t>> stack;
    stack.emplace_back(loss.node(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            const NodePtr& child = node->inputs[next++];
            if (child->requires_grad && visited.insert(child.get()).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (auto& node : order) {
        node->grad.assign(node->value.size(), Scalar(0));
    }
    loss.node()->grad[0] = Scalar(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward) {
            (*it)->backward(**it);
        }
    }
    for (auto& node : order) {
        if (node->backward) {
            node->backward = nullptr;
            node->inputs.clear();
            node->grad.clear();
            node->grad.shrink_to_fit();
        }
    }
}

/// Ordered table of named trainable leaves.
template <typename Scalar>
class ParameterSet {
public:
    using Entry = std::pair<std::string, Tensor<Scalar>>;

    Tensor<Scalar> add(std::string name, Shape shape, std::vector<Scalar> values)
    {
        if (index_.count(name)) {
            throw ContractError("duplicate parameter name '" + name + "'");
        }
        index_.emplace(name, entries_.size());
        entries_.emplace_back(std::move(name), Tensor<Scalar>::parameter(std::move(shape), std::move(values)));
        return entries_.back().second;
    }

    const Tensor<Scalar>& get(const std::string& name) const
    {
        auto it = index_.find(name);
        if (it == index_.end()) {
            throw ContractError("unknown parameter '" + name + "'");
        }
        return entries_[it->second].second;
    }
    Tensor<Scalar>& get(const std::string& name)
    {
        return const_cast<Tensor<Scalar>&>(static_cast<const ParameterSet&>(*this).get(name));
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t size() const { return entries_.size(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }
    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }

    Index total_count() const
    {
        Index total = 0;
        for (const auto& [name, tensor] : entries_) {
            total += tensor.numel();
        }
        return total;
    }

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

/// Backward pass returning one gradient per named parameter. Parameters the
/// loss does not depend on get exact zeros.
template <typename Scalar>
std::map<std::string, Tensor<Scalar>> backward(const Tensor<Scalar>& loss, const ParameterSet<Scalar>& params)
{
    for (const auto& [name, tensor] : params) {
        tensor.node()->grad.clear();
    }
    backward(loss);
    std::map<std::string, Tensor<Scalar>> grads;
    for (const auto& [name, tensor] : params) {
        grads.emplace(name, tensor.grad());
    }
    return grads;
}

} // namespace dis
