#pragma once

#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mlsp/layers.hpp"

namespace mlsp::nn {

template <typename T>
struct NamedParam {
    std::string name;  // "node/param"
    Param<T>* param;
};

// Directed acyclic layer graph. Nodes are added in topological order (an input
// may only reference earlier nodes), which is what every head builder does
// naturally. One input node carries the batch.
//
// A graph instance is single-user during a forward/backward pair; run separate
// instances on separate threads.
template <typename T>
class ModelGraph {
public:
    int add_input(std::string name, Shape feature_shape) {
        if (!nodes_.empty()) throw DataError("model graph: input must be the first node");
        Node n;
        n.name = std::move(name);
        n.out_shape = std::move(feature_shape);
        nodes_.push_back(std::move(n));
        return 0;
    }

    int add(std::string name, std::unique_ptr<Layer<T>> layer, std::vector<int> inputs) {
        if (nodes_.empty()) throw DataError("model graph: add an input node first");
        if (inputs.empty() || inputs.size() != layer->arity())
            throw DataError("model graph: node '" + name + "' expects " +
                            std::to_string(layer->arity()) + " inputs, got " +
                            std::to_string(inputs.size()));
        const int id = static_cast<int>(nodes_.size());
        for (int in : inputs)
            if (in < 0 || in >= id)
                throw DataError("model graph: node '" + name + "' references node " +
                                std::to_string(in) + " out of range (acyclicity)");
        Node n;
        n.name = std::move(name);
        n.layer = std::move(layer);
        n.inputs = std::move(inputs);
        nodes_.push_back(std::move(n));
        return id;
    }

    void set_output(int node) { output_node_ = node; }
    void set_logits(int node) { logits_node_ = node; }
    int output_node() const { return output_node_; }
    // Node the training loss attaches to (pre-softmax for classifiers).
    int loss_node() const { return logits_node_.value_or(output_node_); }
    std::optional<int> logits_node() const { return logits_node_; }

    const Shape& input_shape() const { return nodes_.front().out_shape; }
    const Shape& output_shape(int node) const { return nodes_[static_cast<size_t>(node)].out_shape; }
    size_t node_count() const { return nodes_.size(); }

    // Infers static shapes, initializes parameters (deterministic per node),
    // and computes which nodes can feed gradients to trainable parameters.
    void finalize(uint64_t init_seed) {
        if (nodes_.size() < 2) throw DataError("model graph: no layers");
        if (output_node_ < 0) output_node_ = static_cast<int>(nodes_.size()) - 1;
        run_seed_ = init_seed;
        for (size_t i = 1; i < nodes_.size(); ++i) {
            Rng rng(keyed_u64(init_seed, rng_tag::kInit, i));
            nodes_[i].layer->init(rng);
        }
        // needs_grad: a node's output gradient matters iff its subtree holds
        // trainable parameters.
        for (size_t i = 0; i < nodes_.size(); ++i) {
            bool need = false;
            if (nodes_[i].layer)
                for (Param<T>* p : nodes_[i].layer->params())
                    if (p->trainable) need = true;
            if (nodes_[i].layer && !need)
                for (int in : nodes_[i].inputs) need = need || nodes_[static_cast<size_t>(in)].needs_grad;
            nodes_[i].needs_grad = need;
        }
        params_.clear();
        for (size_t i = 1; i < nodes_.size(); ++i)
            for (Param<T>* p : nodes_[i].layer->params())
                params_.push_back({nodes_[i].name + "/" + p->name, p});
        finalized_ = true;
    }

    Tensor<T> forward(Tensor<T> batch, Mode mode) {
        check_finalized();
        const Shape& feat = nodes_.front().out_shape;
        bool ok = batch.rank() == feat.size() + 1 && batch.dim(0) >= 1;
        for (size_t d = 0; ok && d < feat.size(); ++d) ok = batch.shape[d + 1] == feat[d];
        if (!ok) {
            Shape expect = feat;
            expect.insert(expect.begin(), -1);
            throw DataError("model input: expected [batch x " + shape_str(feat) + "], got " +
                            shape_str(batch.shape));
        }
        if (mode == Mode::Train) ++step_;
        ForwardCtx ctx;
        ctx.mode = mode;
        ctx.dropout_key = keyed_u64(run_seed_, rng_tag::kDropout, step_);
        outputs_.assign(nodes_.size(), Tensor<T>{});
        outputs_[0] = std::move(batch);
        for (size_t i = 1; i < nodes_.size(); ++i) {
            std::vector<const Tensor<T>*> ins;
            ins.reserve(nodes_[i].inputs.size());
            for (int in : nodes_[i].inputs) ins.push_back(&outputs_[static_cast<size_t>(in)]);
            ctx.node_id = static_cast<int>(i);
            ctx.node_name = &nodes_[i].name;
            outputs_[i] = nodes_[i].layer->forward(ins, ctx);
        }
        cached_mode_ = mode;
        return outputs_[static_cast<size_t>(output_node_)];
    }

    const Tensor<T>& output_of(int node) const { return outputs_[static_cast<size_t>(node)]; }

    // Seeds the gradient at `at_node` (default: loss node) and propagates.
    // Parameter gradients accumulate; call zero_grads() before each step.
    void backward(Tensor<T> grad, int at_node = -1) {
        check_finalized();
        if (!cached_mode_ || *cached_mode_ == Mode::Eval)
            throw DataError("backward without a cached training-mode forward");
        const int seed_node = at_node < 0 ? loss_node() : at_node;
        if (grad.shape != outputs_[static_cast<size_t>(seed_node)].shape)
            throw DataError("backward: gradient shape " + shape_str(grad.shape) +
                            " does not match node output " +
                            shape_str(outputs_[static_cast<size_t>(seed_node)].shape));
        std::vector<Tensor<T>> grads(nodes_.size());
        grads[static_cast<size_t>(seed_node)] = std::move(grad);
        for (size_t i = nodes_.size(); i-- > 1;) {
            if (grads[i].empty()) continue;
            Node& n = nodes_[i];
            std::vector<const Tensor<T>*> ins;
            ins.reserve(n.inputs.size());
            std::vector<char> need(n.inputs.size());
            for (size_t j = 0; j < n.inputs.size(); ++j) {
                ins.push_back(&outputs_[static_cast<size_t>(n.inputs[j])]);
                need[j] = nodes_[static_cast<size_t>(n.inputs[j])].needs_grad ? 1 : 0;
            }
            BackwardIO<T> io{ins, outputs_[i], grads[i], need};
            std::vector<Tensor<T>> gins = n.layer->backward(io);
            for (size_t j = 0; j < n.inputs.size(); ++j)
                if (need[j] && !gins[j].empty())
                    accumulate_into(grads[static_cast<size_t>(n.inputs[j])], gins[j]);
            grads[i] = Tensor<T>{};  // free as we go
        }
        cached_mode_.reset();
    }

    void zero_grads() {
        for (auto& np : params_) np.param->grad.zero();
    }

    const std::vector<NamedParam<T>>& parameters() {
        check_finalized();
        return params_;
    }

    std::vector<NamedParam<T>> trainable_parameters() {
        check_finalized();
        std::vector<NamedParam<T>> out;
        for (auto& np : params_)
            if (np.param->trainable) out.push_back(np);
        return out;
    }

    // Trainable scalar count; a pure function of the architecture.
    int64_t param_count() {
        check_finalized();
        int64_t n = 0;
        for (auto& np : params_)
            if (np.param->trainable) n += np.param->value.numel();
        return n;
    }

    // Full state (including running statistics) for best-model reload.
    std::vector<Tensor<T>> snapshot_state() {
        check_finalized();
        std::vector<Tensor<T>> s;
        s.reserve(params_.size());
        for (auto& np : params_) s.push_back(np.param->value);
        return s;
    }

    void restore_state(const std::vector<Tensor<T>>& s) {
        check_finalized();
        if (s.size() != params_.size()) throw DataError("restore_state: snapshot size mismatch");
        for (size_t i = 0; i < s.size(); ++i) {
            if (s[i].shape != params_[i].param->value.shape)
                throw DataError("restore_state: shape mismatch at " + params_[i].name);
            params_[i].param->value = s[i];
        }
    }

    void set_run_seed(uint64_t seed) { run_seed_ = seed; }
    uint64_t run_seed() const { return run_seed_; }

    bool has_dropout() const {
        for (const Node& n : nodes_)
            if (n.layer && std::string(n.layer->kind()) == "dropout") return true;
        return false;
    }

private:
    struct Node {
        std::string name;
        std::unique_ptr<Layer<T>> layer;  // null for the input node
        std::vector<int> inputs;
        Shape out_shape;  // static feature shape (no batch dim); inferred lazily
        bool needs_grad = false;
    };

    void check_finalized() const {
        if (!finalized_) throw DataError("model graph: finalize() not called");
    }

    std::vector<Node> nodes_;
    std::vector<NamedParam<T>> params_;
    std::vector<Tensor<T>> outputs_;
    int output_node_ = -1;
    std::optional<int> logits_node_;
    std::optional<Mode> cached_mode_;
    uint64_t run_seed_ = 0;
    uint64_t step_ = 0;
    bool finalized_ = false;
};

}  // namespace mlsp::nn
