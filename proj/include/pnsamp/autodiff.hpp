#pragma once

#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "pnsamp/tensor.hpp"

namespace pnsamp {

using NodeId = std::size_t;

template <typename T>
class Graph;

// One differentiable operation in the graph. forward() computes the node
// value from its input values; backward() distributes the node's output
// gradient onto the inputs' gradient buffers.
template <typename T>
class Op {
public:
    virtual ~Op() = default;
    virtual const char* kind() const = 0;
    virtual Tensor<T> forward(Graph<T>& g, NodeId self) = 0;
    virtual void backward(Graph<T>& g, NodeId self) = 0;
};

template <typename T>
struct Node {
    std::unique_ptr<Op<T>> op;  // null for leaves
    std::vector<NodeId> inputs;
    std::string label;
    Tensor<T> value;
    std::vector<T> grad;       // same length as value.data once backward touches it
    bool needs_grad = false;   // some leaf below (or this leaf) requires grad
    bool is_input = false;     // named graph input, bound at forward() time
    bool input_bound = false;
    Tensor<T>* param = nullptr;  // external parameter leaf
};

// Reverse-mode autodiff over an explicit, topologically ordered node list.
// A graph is built once (inputs/params + operation nodes), then driven
// through forward / backward any number of times. Input values are rebound
// on every forward; parameter leaves read through their external tensor, and
// their gradients accumulate into Tensor::grad across backward calls until
// the caller zeroes them. One graph instance must not be driven from two
// threads.
template <typename T>
class Graph {
public:
    NodeId input(const std::string& name, Shape shape, bool requires_grad = false) {
        require_fresh_name(name);
        Node<T> node;
        node.is_input = true;
        node.label = name;
        node.value = Tensor<T>(std::move(shape));
        node.value.requires_grad = requires_grad;
        node.needs_grad = requires_grad;
        nodes_.push_back(std::move(node));
        const NodeId id = nodes_.size() - 1;
        leaves_[name] = id;
        return id;
    }

    NodeId param(const std::string& name, Tensor<T>* p) {
        require_fresh_name(name);
        Node<T> node;
        node.param = p;
        node.label = name;
        node.needs_grad = p->requires_grad;
        nodes_.push_back(std::move(node));
        const NodeId id = nodes_.size() - 1;
        leaves_[name] = id;
        return id;
    }

    NodeId add_node(std::unique_ptr<Op<T>> op, std::vector<NodeId> inputs,
                    const std::string& label = "") {
        Node<T> node;
        node.label = label.empty()
                         ? detail::cat(op->kind(), "#", nodes_.size())
                         : label;
        for (NodeId in : inputs) {
            if (in >= nodes_.size()) {
                throw ValueError(detail::cat("node ", node.label, ": input id ", in,
                                             " does not precede it"));
            }
            node.needs_grad = node.needs_grad || nodes_[in].needs_grad;
        }
        node.op = std::move(op);
        node.inputs = std::move(inputs);
        nodes_.push_back(std::move(node));
        forward_done_ = false;
        return nodes_.size() - 1;
    }

    void mark_output(const std::string& name, NodeId id) { outputs_[name] = id; }

    bool training() const { return training_; }
    void set_training(bool on) { training_ = on; }

    // Executes every node exactly once, in topological (id) order.
    std::map<std::string, Tensor<T>> forward(const std::map<std::string, Tensor<T>>& inputs) {
        bind_inputs(inputs);
        for (NodeId id = 0; id < nodes_.size(); ++id) {
            Node<T>& node = nodes_[id];
            node.grad.clear();
            if (node.is_input) {
                if (!node.input_bound) {
                    throw ValueError(detail::cat("forward: missing input '", node.label, "'"));
                }
                continue;
            }
            if (node.param) continue;
            node.value = node.op->forward(*this, id);
        }
        forward_done_ = true;
        std::map<std::string, Tensor<T>> out;
        for (const auto& [name, id] : outputs_) out[name] = nodes_[id].value;
        return out;
    }

    // Seeds are named after outputs. Visits nodes in exact reverse topological
    // order; leaf gradients accumulate, intermediate gradients are released.
    void backward(const std::map<std::string, Tensor<T>>& seeds) {
        if (!forward_done_) {
            throw ValueError("backward called before forward on this graph");
        }
        for (auto& node : nodes_) node.grad.clear();
        for (const auto& [name, seed] : seeds) {
            auto it = outputs_.find(name);
            if (it == outputs_.end()) {
                throw ValueError(detail::cat("backward: unknown output '", name, "'"));
            }
            Node<T>& node = nodes_[it->second];
            if (seed.shape != value(it->second).shape) {
                throw ShapeError(detail::cat("backward: seed for '", name, "' has shape ",
                                             shape_str(seed.shape), ", output has ",
                                             shape_str(value(it->second).shape)));
            }
            std::vector<T>& g = grad_of(it->second);
            for (std::size_t i = 0; i < seed.data.size(); ++i) g[i] += seed.data[i];
        }
        for (NodeId id = nodes_.size(); id-- > 0;) {
            Node<T>& node = nodes_[id];
            if (!node.op || !node.needs_grad || node.grad.empty()) continue;
            node.op->backward(*this, id);
            node.grad.clear();
            node.grad.shrink_to_fit();
        }
        // Flush gradients of param leaves into the external tensors.
        for (auto& node : nodes_) {
            if (node.param && node.param->requires_grad && !node.grad.empty()) {
                node.param->ensure_grad();
                for (std::size_t i = 0; i < node.grad.size(); ++i) {
                    node.param->grad[i] += node.grad[i];
                }
                node.grad.clear();
            }
        }
    }

    const Tensor<T>& value(NodeId id) const {
        const Node<T>& node = nodes_[id];
        return node.param ? *node.param : node.value;
    }

    // Gradient buffer of a node, allocated on first touch.
    std::vector<T>& grad_of(NodeId id) {
        Node<T>& node = nodes_[id];
        if (node.grad.empty()) node.grad.assign(value(id).numel(), T(0));
        return node.grad;
    }

    bool node_needs_grad(NodeId id) const { return nodes_[id].needs_grad; }
    const std::vector<NodeId>& inputs_of(NodeId id) const { return nodes_[id].inputs; }
    const std::string& label_of(NodeId id) const { return nodes_[id].label; }
    std::size_t node_count() const { return nodes_.size(); }

    // Gradient w.r.t. a named input, valid after backward().
    const std::vector<T>& input_gradient(const std::string& name) {
        return grad_of(leaf_id(name));
    }

    NodeId leaf_id(const std::string& name) const {
        auto it = leaves_.find(name);
        if (it == leaves_.end()) throw ValueError(detail::cat("unknown leaf '", name, "'"));
        return it->second;
    }

    bool has_leaf(const std::string& name) const { return leaves_.count(name) > 0; }

    bool is_param_leaf(const std::string& name) const {
        return nodes_[leaf_id(name)].param != nullptr;
    }

    NodeId output_id(const std::string& name) const {
        auto it = outputs_.find(name);
        if (it == outputs_.end()) throw ValueError(detail::cat("unknown output '", name, "'"));
        return it->second;
    }

    const std::map<std::string, NodeId>& outputs() const { return outputs_; }

    // Mutable access to an input or param leaf's values (used by the
    // finite-difference checker to perturb single elements).
    Tensor<T>& leaf_tensor(const std::string& name) {
        Node<T>& node = nodes_[leaf_id(name)];
        return node.param ? *node.param : node.value;
    }

    void rebind_input(const std::string& name, Tensor<T> v) {
        Node<T>& node = nodes_[leaf_id(name)];
        if (!node.is_input) throw ValueError(detail::cat("'", name, "' is not an input leaf"));
        if (v.shape != node.value.shape) {
            throw ShapeError(detail::cat("input '", name, "': expected shape ",
                                         shape_str(node.value.shape), ", got ",
                                         shape_str(v.shape)));
        }
        const bool rg = node.value.requires_grad;
        node.value = std::move(v);
        node.value.requires_grad = rg;
        node.input_bound = true;
    }

private:
    void bind_inputs(const std::map<std::string, Tensor<T>>& inputs) {
        for (const auto& [name, v] : inputs) rebind_input(name, v);
    }

    void require_fresh_name(const std::string& name) {
        if (leaves_.count(name)) {
            throw ValueError(detail::cat("duplicate leaf name '", name, "'"));
        }
    }

    std::vector<Node<T>> nodes_;
    std::map<std::string, NodeId> leaves_;
    std::map<std::string, NodeId> outputs_;
    bool forward_done_ = false;
    bool training_ = true;
};

// ---------------------------------------------------------------------------
// Element-wise and reduction primitives.
// ---------------------------------------------------------------------------

template <typename T>
class IdentityOp : public Op<T> {
public:
    const char* kind() const override { return "identity"; }
    Tensor<T> forward(Graph<T>& g, NodeId self) override {
        return g.value(g.inputs_of(self)[0]);
    }
    void backward(Graph<T>& g, NodeId self) override {
        const std::vector<T>& dy = g.grad_of(self);
        std::vector<T>& dx = g.grad_of(g.inputs_of(self)[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    }
};

template <typename T>
class AddOp : public Op<T> {
public:
    const char* kind() const override { return "add"; }
    Tensor<T> forward(Graph<T>& g, NodeId self) override {
        const Tensor<T>& a = g.value(g.inputs_of(self)[0]);
        const Tensor<T>& b = g.value(g.inputs_of(self)[1]);
        if (a.shape != b.shape) {
            throw ShapeError(detail::cat("add node ", g.label_of(self), ": shapes ",
                                         shape_str(a.shape), " vs ", shape_str(b.shape)));
        }
        Tensor<T> out = a;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i];
        return out;
    }
    void backward(Graph<T>& g, NodeId self) override {
        const std::vector<T>& dy = g.grad_of(self);
        for (int k = 0; k < 2; ++k) {
            std::vector<T>& dx = g.grad_of(g.inputs_of(self)[k]);
            for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
        }
    }
};

template <typename T>
class MulOp : public Op<T> {
public:
    const char* kind() const override { return "mul"; }
    Tensor<T> forward(Graph<T>& g, NodeId self) override {
        const Tensor<T>& a = g.value(g.inputs_of(self)[0]);
        const Tensor<T>& b = g.value(g.inputs_of(self)[1]);
        if (a.shape != b.shape) {
            throw ShapeError(detail::cat("mul node ", g.label_of(self), ": shapes ",
                                         shape_str(a.shape), " vs ", shape_str(b.shape)));
        }
        Tensor<T> out = a;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
        return out;
    }
    void backward(Graph<T>& g, NodeId self) override {
        const std::vector<T>& dy = g.grad_of(self);
        const Tensor<T>& a = g.value(g.inputs_of(self)[0]);
        const Tensor<T>& b = g.value(g.inputs_of(self)[1]);
        std::vector<T>& da = g.grad_of(g.inputs_of(self)[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * b[i];
        std::vector<T>& db = g.grad_of(g.inputs_of(self)[1]);
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * a[i];
    }
};

template <typename T>
class NegateOp : public Op<T> {
public:
    const char* kind() const override { return "negate"; }
    Tensor<T> forward(Graph<T>& g, NodeId self) override {
        Tensor<T> out = g.value(g.inputs_of(self)[0]);
        for (auto& v : out.data) v = -v;
        return out;
    }
    void backward(Graph<T>& g, NodeId self) override {
        const std::vector<T>& dy = g.grad_of(self);
        std::vector<T>& dx = g.grad_of(g.inputs_of(self)[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] -= dy[i];
    }
};

template <typename T>
class ScaleOp : public Op<T> {
public:
    explicit ScaleOp(T factor) : factor_(factor) {}
    const char* kind() const override { return "scale"; }
    Tensor<T> forward(Graph<T>& g, NodeId self) override {
        Tensor<T> out = g.value(g.inputs_of(self)[0]);
        for (auto& v : out.data) v *= factor_;
        return out;
    }
    void backward(Graph<T>& g, NodeId self) override {
        const std::vector<T>& dy = g.grad_of(self);
        std::vector<T>& dx = g.grad_of(g.inputs_of(self)[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += factor_ * dy[i];
    }

private:
    T factor_;
};

/// Reduces to a one-element tensor.
template <typename T>
class SumOp : public Op<T> {
public:
    const char* kind() const override { return "sum"; }
    Tensor<T> forward(Graph<T>& g, NodeId self) override {
        const Tensor<T>& x = g.value(g.inputs_of(self)[0]);
        T acc = T(0);
        for (const T v : x.data) acc += v;
        return Tensor<T>::scalar(acc);
    }
    void backward(Graph<T>& g, NodeId self) override {
        const T dy = g.grad_of(self)[0];
        std::vector<T>& dx = g.grad_of(g.inputs_of(self)[0]);
        for (auto& v : dx) v += dy;
    }
};

/// Row-major reinterpretation; element count must be unchanged.
template <typename T>
class ReshapeOp : public Op<T> {
public:
    explicit ReshapeOp(Shape target) : target_(std::move(target)) {}
    const char* kind() const override { return "reshape"; }
    Tensor<T> forward(Graph<T>& g, NodeId self) override {
        const Tensor<T>& x = g.value(g.inputs_of(self)[0]);
        if (shape_numel(target_) != x.numel()) {
            throw ShapeError(detail::cat("reshape node ", g.label_of(self), ": ",
                                         shape_str(x.shape), " -> ", shape_str(target_)));
        }
        Tensor<T> out = x;
        out.shape = target_;
        return out;
    }
    void backward(Graph<T>& g, NodeId self) override {
        const std::vector<T>& dy = g.grad_of(self);
        std::vector<T>& dx = g.grad_of(g.inputs_of(self)[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    }

private:
    Shape target_;
};

// Convenience builders.
template <typename T>
NodeId make_identity(Graph<T>& g, NodeId x) {
    return g.add_node(std::make_unique<IdentityOp<T>>(), {x});
}
template <typename T>
NodeId make_add(Graph<T>& g, NodeId a, NodeId b) {
    return g.add_node(std::make_unique<AddOp<T>>(), {a, b});
}
template <typename T>
NodeId make_mul(Graph<T>& g, NodeId a, NodeId b) {
    return g.add_node(std::make_unique<MulOp<T>>(), {a, b});
}
template <typename T>
NodeId make_negate(Graph<T>& g, NodeId x) {
    return g.add_node(std::make_unique<NegateOp<T>>(), {x});
}
template <typename T>
NodeId make_scale(Graph<T>& g, NodeId x, T factor) {
    return g.add_node(std::make_unique<ScaleOp<T>>(factor), {x});
}
template <typename T>
NodeId make_sum(Graph<T>& g, NodeId x) {
    return g.add_node(std::make_unique<SumOp<T>>(), {x});
}
template <typename T>
NodeId make_reshape(Graph<T>& g, NodeId x, Shape target) {
    return g.add_node(std::make_unique<ReshapeOp<T>>(std::move(target)), {x});
}

}  // namespace pnsamp
