#pragma once

// Sparse mixture-of-experts layer: linear router, top-K gate without
// renormalisation, per-expert capacity with position-priority dropping,
// dispatch/combine, load-balance loss and router z-loss.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "omoe/autodiff.hpp"
#include "omoe/tensor.hpp"

namespace omoe {

enum class DropPolicy { position_priority };

struct RouterConfig {
    std::size_t num_experts = 8;
    std::size_t top_k = 2;
    double capacity_factor = 1.25;
    DropPolicy drop_policy = DropPolicy::position_priority;

    /// Throws ConfigError unless 1 <= K <= E and capacity_factor > 0.
    void validate() const;

    /// C = max(K, ceil(capacity_factor * tokens * K / E)).
    std::size_t capacity(std::size_t group_tokens) const;
};

struct RouterOutput {
    Tensor logits;  // [B×E]
    Tensor probs;   // [B×E]
    std::size_t tokens = 0;
    std::size_t top_k = 0;
    std::size_t num_experts = 0;
    std::vector<std::size_t> topk_idx;  // [B×K], descending probability
    std::vector<double> gate_vals;      // [B×K]
    std::vector<std::uint8_t> kept;     // [B×K]

    std::size_t expert(std::size_t t, std::size_t j) const { return topk_idx[t * top_k + j]; }
    double gate(std::size_t t, std::size_t j) const { return gate_vals[t * top_k + j]; }
    bool is_kept(std::size_t t, std::size_t j) const { return kept[t * top_k + j] != 0; }
    std::size_t dropped() const;
};

struct BalanceLossTerms {
    std::vector<double> dispatch_fraction;  // m_i, counts pre-drop assignments
    std::vector<double> mean_prob;          // batch mean of softmax probabilities
    double balance_loss = 0.0;
    double router_z_loss = 0.0;
};

/// Keeps an assignment iff its expert has fewer than `capacity` kept
/// assignments so far, scanning tokens in row order and choices in rank order.
std::vector<std::uint8_t> apply_capacity(std::span<const std::size_t> topk_idx, std::size_t top_k,
                                         std::size_t num_experts, std::size_t capacity);

/// As above with C derived from the config for a group of topk_idx.size()/K tokens.
std::vector<std::uint8_t> apply_capacity(std::span<const std::size_t> topk_idx, const RouterConfig& cfg);

/// Routes every row of x as a single routing group.
RouterOutput route(const Tensor& x, const Tensor& router_weights, const RouterConfig& cfg);

// ---- differentiable layer ---------------------------------------------------

struct FfnParams {
    ad::Var w_gate;  // [D×F]
    ad::Var w_up;    // [D×F]
    ad::Var w_out;   // [F×D]
};

/// SwiGLU feed-forward: (silu(x W_gate) ⊙ x W_up) W_out.
ad::Var swiglu_ffn(ad::Var x, const FfnParams& p);

struct MoeParams {
    ad::Var router;  // [D×E]
    std::vector<FfnParams> experts;
};

struct RoutedTokens {
    ad::Var logits;
    ad::Var probs;
    RouterOutput decisions;
};

/// Tape-level routing. Rows are split into consecutive groups of
/// `group_size` tokens (0 = one group); capacity is enforced per group.
RoutedTokens route(ad::Var x, ad::Var router_weights, const RouterConfig& cfg, std::size_t group_size = 0);

struct BalanceLoss {
    ad::Var value;
    std::vector<double> dispatch_fraction;
    std::vector<double> mean_prob;
};

/// L_b = (E / K) * sum_i m_i * P_i. Differentiable through probs only.
BalanceLoss balance_loss(ad::Var probs, std::span<const std::size_t> topk_idx, std::size_t top_k);

/// Mean over rows of logsumexp(row)^2.
ad::Var router_z_loss(ad::Var logits);

struct MoeOutput {
    ad::Var y;
    ad::Var balance_loss;
    ad::Var router_z_loss;
    BalanceLossTerms terms;
    RouterOutput routing;
};

MoeOutput moe_forward(ad::Var x, const MoeParams& params, const RouterConfig& cfg, std::size_t group_size = 0);

// Value-level conveniences (each runs a throwaway tape).
double balance_loss_value(const Tensor& probs, std::span<const std::size_t> topk_idx, std::size_t top_k);
double router_z_loss_value(const Tensor& logits);

}  // namespace omoe
