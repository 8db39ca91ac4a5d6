#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "duflow/error.hpp"
#include "duflow/tensor.hpp"

namespace duflow {

/// A learnable tensor that outlives any single graph. `grad` accumulates
/// across every graph node that references it.
template <typename T>
struct Parameter {
    std::string name;
    Tensor4<T> value;
    Tensor4<T> grad;

    Parameter() = default;
    Parameter(std::string n, Tensor4<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() { grad = Tensor4<T>(value.shape()); }
};

/// Handle to a node of a Graph.
struct Var {
    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
    std::size_t id = npos;
    bool valid() const { return id != npos; }
};

/// Tape for reverse-mode differentiation. Built fresh for every step: ops
/// append nodes in execution order and `backward` walks them in reverse.
template <typename T>
class Graph {
   public:
    using BackwardFn = std::function<void(Graph &, const Tensor4<T> &value, const Tensor4<T> &grad)>;

    Graph() = default;
    Graph(const Graph &) = delete;
    Graph &operator=(const Graph &) = delete;
    Graph(Graph &&) noexcept = default;
    Graph &operator=(Graph &&) noexcept = default;

    Var constant(Tensor4<T> value) { return push(std::move(value), false, {}, nullptr); }

    /// Leaf whose gradient is kept in the graph (read it with grad()).
    Var variable(Tensor4<T> value) { return push(std::move(value), true, {}, nullptr); }

    /// Leaf bound to a Parameter. Referencing the same parameter twice yields
    /// the same node, so shared weights have a single gradient slot.
    Var parameter(Parameter<T> &p) {
        auto it = param_nodes_.find(&p);
        if (it != param_nodes_.end()) return Var{it->second};
        Var v = push(p.value, true, {}, nullptr);
        nodes_[v.id].sink = &p;
        param_nodes_.emplace(&p, v.id);
        return v;
    }

    /// Records an op result. `fn` is dropped when no input needs a gradient.
    Var record(Tensor4<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
        bool needs = false;
        for (Var in : inputs) needs = needs || requires_grad(in);
        return push(std::move(value), needs, std::vector<Var>(inputs), needs ? std::move(fn) : BackwardFn{});
    }
    Var record(Tensor4<T> value, const std::vector<Var> &inputs, BackwardFn fn) {
        bool needs = false;
        for (Var in : inputs) needs = needs || requires_grad(in);
        return push(std::move(value), needs, inputs, needs ? std::move(fn) : BackwardFn{});
    }

    const Tensor4<T> &value(Var v) const { return node(v).value; }
    const Shape4 &shape(Var v) const { return node(v).value.shape(); }
    bool requires_grad(Var v) const { return node(v).requires_grad; }

    /// Gradient of the last backward() target w.r.t. `v` (zeros if untouched).
    const Tensor4<T> &grad(Var v) {
        Node &nd = nodes_.at(v.id);
        if (nd.grad.empty()) nd.grad = Tensor4<T>(nd.value.shape());
        return nd.grad;
    }

    /// Accumulation buffer used by backward functions.
    Tensor4<T> &grad_buffer(Var v) {
        Node &nd = nodes_.at(v.id);
        if (nd.grad.empty()) nd.grad = Tensor4<T>(nd.value.shape());
        return nd.grad;
    }

    /// Seeds d(loss)/d(loss) = 1 and sweeps the tape once in reverse. Parameter
    /// gradients are added into Parameter::grad.
    void backward(Var loss) {
        if (backward_done_)
            throw Error(ErrorCode::BackwardTwice, "backward() already ran on this graph; call reset() first");
        const Node &ln = node(loss);
        if (ln.value.size() != 1)
            throw Error(ErrorCode::ShapeMismatch, "backward() needs a scalar loss, got " + ln.value.shape().str());
        backward_done_ = true;
        if (!ln.requires_grad) return;
        grad_buffer(loss)[0] = T(1);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node &nd = nodes_[i];
            if (nd.grad.empty()) continue;
            if (nd.backward) {
                // the node's value and grad are not touched by its own backward
                nd.backward(*this, nd.value, nd.grad);
            }
        }
        for (Node &nd : nodes_) {
            if (nd.sink == nullptr || nd.grad.empty()) continue;
            auto &dst = nd.sink->grad;
            if (dst.shape() != nd.grad.shape()) dst = Tensor4<T>(nd.grad.shape());
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += nd.grad[k];
        }
    }

    void reset() {
        nodes_.clear();
        param_nodes_.clear();
        backward_done_ = false;
    }

    std::size_t size() const { return nodes_.size(); }

   private:
    struct Node {
        Tensor4<T> value;
        Tensor4<T> grad;
        bool requires_grad = false;
        std::vector<Var> inputs;
        BackwardFn backward;
        Parameter<T> *sink = nullptr;
    };

    const Node &node(Var v) const {
        if (v.id >= nodes_.size()) throw Error(ErrorCode::InvalidArgument, "Var does not belong to this graph");
        return nodes_[v.id];
    }

    Var push(Tensor4<T> value, bool requires_grad, std::vector<Var> inputs, BackwardFn fn) {
        Node nd;
        nd.value = std::move(value);
        nd.requires_grad = requires_grad;
        nd.inputs = std::move(inputs);
        nd.backward = std::move(fn);
        nodes_.push_back(std::move(nd));
        return Var{nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
    std::unordered_map<const Parameter<T> *, std::size_t> param_nodes_;
    bool backward_done_ = false;
};

}  // namespace duflow
