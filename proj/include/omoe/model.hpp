#pragma once

// Decoder-only transformer: pre-LayerNorm blocks with RoPE causal attention,
// SwiGLU FFNs, and residual-MoE blocks interleaved every `moe_every` layers.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "omoe/autodiff.hpp"
#include "omoe/moe.hpp"
#include "omoe/tensor.hpp"
#include "omoe/trace.hpp"

namespace omoe {

inline constexpr int kIgnoreLabel = -1;

struct LossWeights {
    double balance = 0.01;
    double z_logits = 0.001;
    double z_router = 0.0001;
};

enum class BlockKind { dense, residual_moe };

struct ModelConfig {
    std::size_t hidden = 64;
    std::size_t ffn_hidden = 128;
    std::size_t heads = 4;
    std::size_t head_dim = 16;
    std::size_t layers = 6;
    std::size_t vocab = 358;
    std::size_t moe_every = 2;
    std::size_t max_seq_len = 64;
    RouterConfig router;
    LossWeights weights;
    double rope_base = 10000.0;
    bool prefix_bidirectional = false;

    void validate() const;
    /// Layer i is residual-MoE iff (i + 1) % moe_every == 0.
    BlockKind block_kind(std::size_t layer) const;
    std::vector<std::size_t> moe_layers() const;
    /// Third MoE layer, or the last one when there are fewer than three.
    std::size_t default_trace_layer() const;
};

/// Named parameter tensors in a stable (sorted) order.
class ParameterStore {
public:
    void set(const std::string& name, Tensor value);
    const Tensor& get(const std::string& name) const;
    Tensor& get(const std::string& name);
    bool contains(const std::string& name) const { return tensors_.contains(name); }
    std::size_t size() const noexcept { return tensors_.size(); }
    std::size_t num_scalars() const;

    auto begin() const { return tensors_.begin(); }
    auto end() const { return tensors_.end(); }
    auto begin() { return tensors_.begin(); }
    auto end() { return tensors_.end(); }

    friend bool operator==(const ParameterStore&, const ParameterStore&) = default;

private:
    std::map<std::string, Tensor> tensors_;
};

using BoundParams = std::unordered_map<std::string, ad::Var>;

/// A padded batch of sequences. labels[s*T + i] is the token expected after
/// position i (kIgnoreLabel where no loss applies).
struct Batch {
    std::size_t num_seqs = 0;
    std::size_t seq_len = 0;
    std::vector<int> tokens;
    std::vector<int> labels;
    std::vector<std::size_t> lengths;         // unpadded length per sequence
    std::vector<std::size_t> visible_prefix;  // bidirectional prefix per sequence
    std::vector<std::string> domains;
    std::vector<std::size_t> seq_ids;
};

struct AttentionParams {
    ad::Var norm_gain, norm_bias;
    ad::Var wq, wk, wv, wo;
};

struct BlockParams {
    AttentionParams attn;
    ad::Var ffn_norm_gain, ffn_norm_bias;
    FfnParams ffn;
    std::optional<MoeParams> moe;
};

struct BlockContext {
    ad::AttentionLayout layout;
    std::vector<std::size_t> positions;  // one per row
    RouterConfig router;
    std::size_t routing_group = 0;       // tokens per capacity group
    double rope_base = 10000.0;
};

struct BlockOutput {
    ad::Var x;
    std::optional<MoeOutput> moe;
};

/// Dense blocks: x += MHA(LN(x)); x += FFN(LN(x)).
/// Residual-MoE blocks: x += MHA(LN(x)); x += MoE(x'') + FFN(x'') with x'' = LN(x).
BlockOutput block_forward(ad::Var x, BlockKind kind, const BlockParams& params, const BlockContext& ctx);

ad::Var attention_forward(ad::Var x_norm, const AttentionParams& p, const BlockContext& ctx);

/// Rotary embedding on a [B×T×heads×head_dim] tensor; positions has length T.
Tensor rope_apply(const Tensor& x, std::span<const std::size_t> positions, double base = 10000.0);

struct MoeLayerAux {
    std::size_t layer = 0;
    ad::Var balance_loss;
    ad::Var router_z_loss;
    BalanceLossTerms terms;
    RouterOutput routing;
};

struct LossParts {
    ad::Var total;
    double ce = 0.0;
    double balance = 0.0;   // mean over MoE layers
    double z_router = 0.0;  // mean over MoE layers
    double z_logits = 0.0;
};

/// L = CE + w_b * mean(L_b) + w_zl * z(logits) + w_zr * mean(L_z router).
/// CE and the logits z-loss cover positions whose label is not ignored.
LossParts total_loss(ad::Var logits, std::span<const int> labels, std::span<const MoeLayerAux> aux,
                     const LossWeights& weights);

struct AccuracyStats {
    std::size_t correct = 0;
    std::size_t total = 0;
    double value() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Argmax-match count over non-ignored positions.
AccuracyStats token_accuracy(const Tensor& logits, std::span<const int> labels);

struct ForwardOptions {
    std::optional<double> capacity_factor;  // overrides the configured one
    bool record_trace = false;
};

struct ForwardResult {
    ad::Var logits;  // [num_seqs*seq_len × vocab]
    std::vector<MoeLayerAux> aux;
    RoutingTrace trace;
    std::size_t routed_assignments = 0;
    std::size_t dropped_assignments = 0;
};

class Model {
public:
    Model(ModelConfig config, ParameterStore params);

    /// Fresh parameters: projections ~ N(0, 0.02/sqrt(layers)), embeddings
    /// ~ N(0, 0.02), LayerNorm gain 1 / bias 0.
    static Model initialize(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const noexcept { return config_; }
    const ParameterStore& params() const noexcept { return params_; }
    ParameterStore& params() noexcept { return params_; }

    BoundParams bind(ad::Tape& tape, bool requires_grad = true) const;
    BlockParams block_params(const BoundParams& bound, std::size_t layer) const;
    ForwardResult forward(const BoundParams& bound, const Batch& batch, const ForwardOptions& options = {}) const;

private:
    ModelConfig config_;
    ParameterStore params_;
};

std::string layer_prefix(std::size_t layer);

}  // namespace omoe
