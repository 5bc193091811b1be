#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Tape records every operation of one forward pass; Var is a cheap handle
// (tape pointer + node id) to a recorded value. Tapes are single use: after
// backward() the tape refuses further backward calls. Independent tapes share
// no state and may live on different threads.

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "omoe/tensor.hpp"

namespace omoe::ad {

using NodeId = std::size_t;

class Tape;

class Var {
public:
    Var() = default;
    Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;
    NodeId id() const noexcept { return id_; }
    Tape& tape() const { return *tape_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    NodeId id_ = 0;
};

/// dLoss/dLeaf for every leaf created with requires_grad.
class GradientMap {
public:
    const Tensor& at(NodeId id) const;
    const Tensor& at(Var v) const { return at(v.id()); }
    bool contains(NodeId id) const { return grads_.contains(id); }
    std::size_t size() const noexcept { return grads_.size(); }

private:
    friend class Tape;
    std::unordered_map<NodeId, Tensor> grads_;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, NodeId self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad = true);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    /// Runs the reverse sweep from a scalar loss. Each node is visited once,
    /// in reverse recording order; fan-out gradients accumulate additively.
    GradientMap backward(Var loss);

    // Recording interface used by the operations below.
    Var record(Tensor value, std::vector<NodeId> parents, BackwardFn backward);
    const Tensor& value(NodeId id) const { return nodes_[id].value; }
    bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
    const Tensor& grad(NodeId id) const { return nodes_[id].grad; }
    Tensor& grad_ref(NodeId id);
    const std::vector<NodeId>& parents(NodeId id) const { return nodes_[id].parents; }
    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool is_leaf = false;
        bool has_grad = false;
        std::vector<NodeId> parents;
        BackwardFn backward;
    };
    std::deque<Node> nodes_;
    bool consumed_ = false;
};

// ---- differentiable operations -------------------------------------------

Var matmul(Var a, Var b);                  // [m×k]·[k×n]
Var add(Var a, Var b);                     // same shape
Var sub(Var a, Var b);
Var mul(Var a, Var b);                     // elementwise
Var scale(Var a, double factor);
Var add_row(Var a, Var row);               // [m×n] + broadcast [n]
Var mul_row(Var a, Var row);               // [m×n] * broadcast [n]
Var mul_col(Var a, Var col);               // [m×n] * broadcast [m]
Var silu(Var a);
Var square(Var a);
Var sum(Var a);                            // -> scalar
Var mean(Var a);                           // -> scalar
Var mean_rows(Var a);                      // [m×n] -> [n], column means
Var softmax(Var a);                        // along the last axis
Var logsumexp(Var a);                      // [m×n] -> [m]
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6);
Var embedding(Var table, std::span<const int> ids);
Var gather_rows(Var x, std::span<const std::size_t> rows);
Var scatter_rows(Var x, std::size_t num_rows, std::span<const std::size_t> rows);
Var gather_elements(Var x, std::span<const std::size_t> rows, std::span<const std::size_t> cols);
Var reshape(Var a, Shape shape);
Var transpose(Var a);                      // 2-D only
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);

/// Mean cross entropy over positions whose label != ignore_label.
Var cross_entropy(Var logits, std::span<const int> labels, int ignore_label = -1);

/// Rotary position embedding on rows of [N × heads·head_dim]; pairs
/// (2i, 2i+1) of each head rotate by position·base^(-2i/head_dim).
Var rope(Var x, std::span<const std::size_t> positions, std::size_t heads, std::size_t head_dim,
         double base = 10000.0);

struct AttentionLayout {
    std::size_t num_seqs = 1;
    std::size_t seq_len = 1;
    std::size_t heads = 1;
    std::size_t head_dim = 1;
    /// Per-sequence length of a fully visible prefix; empty means causal only.
    std::vector<std::size_t> visible_prefix;
};

/// Multi-head scaled dot-product attention with a causal mask. q, k, v are
/// [num_seqs·seq_len × heads·head_dim], sequences stored contiguously.
Var causal_attention(Var q, Var k, Var v, const AttentionLayout& layout);

// ---- non-differentiable helpers ------------------------------------------

/// Indices of the k largest entries, descending; ties go to the lower index.
std::vector<std::size_t> top_k_indices(std::span<const double> row, std::size_t k);

Tensor softmax_rows(const Tensor& x);
void check_finite(const Tensor& x, const char* what);

}  // namespace omoe::ad
