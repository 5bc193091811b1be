#include "omoe/model.hpp"

#include <cmath>
#include <random>

#include "omoe/errors.hpp"

namespace omoe {

void ModelConfig::validate() const {
    if (hidden == 0 || layers == 0 || vocab == 0 || heads == 0 || ffn_hidden == 0 || max_seq_len == 0)
        throw ConfigError("model: sizes must be positive");
    if (head_dim % 2 != 0) throw ConfigError("model: head_dim must be even for rotary embeddings");
    if (heads * head_dim != hidden)
        throw ConfigError("model: heads x head_dim (" + std::to_string(heads * head_dim) + ") must equal hidden (" +
                          std::to_string(hidden) + ")");
    if (moe_every == 0) throw ConfigError("model: moe_every must be positive");
    router.validate();
}

BlockKind ModelConfig::block_kind(std::size_t layer) const {
    return (layer + 1) % moe_every == 0 ? BlockKind::residual_moe : BlockKind::dense;
}

std::vector<std::size_t> ModelConfig::moe_layers() const {
    std::vector<std::size_t> out;
    for (std::size_t l = 0; l < layers; ++l)
        if (block_kind(l) == BlockKind::residual_moe) out.push_back(l);
    return out;
}

std::size_t ModelConfig::default_trace_layer() const {
    const auto moe = moe_layers();
    if (moe.empty()) throw ConfigError("model has no MoE layers");
    return moe.size() >= 3 ? moe[2] : moe.back();
}

void ParameterStore::set(const std::string& name, Tensor value) { tensors_[name] = std::move(value); }

const Tensor& ParameterStore::get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
}

Tensor& ParameterStore::get(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
}

std::size_t ParameterStore::num_scalars() const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors_) n += t.numel();
    return n;
}

std::string layer_prefix(std::size_t layer) { return "layers." + std::to_string(layer) + "."; }

// ---- blocks ------------------------------------------------------------------

Tensor rope_apply(const Tensor& x, std::span<const std::size_t> positions, double base) {
    if (x.rank() != 4) throw DimensionError("rope_apply expects [B x T x heads x head_dim], got " + shape_str(x.shape()));
    const std::size_t B = x.dim(0), T = x.dim(1), H = x.dim(2), D = x.dim(3);
    if (positions.size() != T) throw DimensionError("rope_apply: one position per time step required");
    std::vector<std::size_t> row_pos(B * T);
    for (std::size_t r = 0; r < B * T; ++r) row_pos[r] = positions[r % T];
    ad::Tape tape;
    ad::Var v = tape.constant(x.reshaped(Shape{B * T, H * D}));
    return ad::rope(v, row_pos, H, D, base).value().reshaped(x.shape());
}

ad::Var attention_forward(ad::Var x_norm, const AttentionParams& p, const BlockContext& ctx) {
    const auto& L = ctx.layout;
    ad::Var q = ad::rope(ad::matmul(x_norm, p.wq), ctx.positions, L.heads, L.head_dim, ctx.rope_base);
    ad::Var k = ad::rope(ad::matmul(x_norm, p.wk), ctx.positions, L.heads, L.head_dim, ctx.rope_base);
    ad::Var v = ad::matmul(x_norm, p.wv);
    return ad::matmul(ad::causal_attention(q, k, v, L), p.wo);
}

BlockOutput block_forward(ad::Var x, BlockKind kind, const BlockParams& params, const BlockContext& ctx) {
    BlockOutput out;
    ad::Var x1 = ad::layer_norm(x, params.attn.norm_gain, params.attn.norm_bias);
    x = ad::add(x, attention_forward(x1, params.attn, ctx));
    ad::Var x2 = ad::layer_norm(x, params.ffn_norm_gain, params.ffn_norm_bias);
    ad::Var ffn = swiglu_ffn(x2, params.ffn);
    if (kind == BlockKind::dense) {
        out.x = ad::add(x, ffn);
        return out;
    }
    if (!params.moe) throw ContractError("block_forward: residual-MoE block without MoE parameters");
    MoeOutput moe = moe_forward(x2, *params.moe, ctx.router, ctx.routing_group);
    out.x = ad::add(ad::add(x, ffn), moe.y);
    out.moe = std::move(moe);
    return out;
}

// ---- loss / metrics ------------------------------------------------------------

LossParts total_loss(ad::Var logits, std::span<const int> labels, std::span<const MoeLayerAux> aux,
                     const LossWeights& weights) {
    LossParts parts;
    ad::Var ce = ad::cross_entropy(logits, labels, kIgnoreLabel);
    parts.ce = ce.value().item();

    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] != kIgnoreLabel) rows.push_back(i);
    ad::Var z_logits = router_z_loss(ad::gather_rows(logits, rows));
    parts.z_logits = z_logits.value().item();

    ad::Var total = ad::add(ce, ad::scale(z_logits, weights.z_logits));
    if (!aux.empty()) {
        ad::Var lb = aux[0].balance_loss, lz = aux[0].router_z_loss;
        for (std::size_t i = 1; i < aux.size(); ++i) {
            lb = ad::add(lb, aux[i].balance_loss);
            lz = ad::add(lz, aux[i].router_z_loss);
        }
        const double inv = 1.0 / static_cast<double>(aux.size());
        lb = ad::scale(lb, inv);
        lz = ad::scale(lz, inv);
        parts.balance = lb.value().item();
        parts.z_router = lz.value().item();
        total = ad::add(total, ad::add(ad::scale(lb, weights.balance), ad::scale(lz, weights.z_router)));
    }
    parts.total = total;
    return parts;
}

AccuracyStats token_accuracy(const Tensor& logits, std::span<const int> labels) {
    if (logits.rows() != labels.size()) throw DimensionError("token_accuracy: label count does not match logits");
    AccuracyStats stats;
    for (std::size_t r = 0; r < labels.size(); ++r) {
        if (labels[r] == kIgnoreLabel) continue;
        const auto row = logits.row(r);
        const std::size_t best = ad::top_k_indices(row, 1)[0];
        ++stats.total;
        if (static_cast<int>(best) == labels[r]) ++stats.correct;
    }
    return stats;
}

// ---- model ---------------------------------------------------------------------

Model::Model(ModelConfig config, ParameterStore params) : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
    const std::size_t H = config_.hidden, V = config_.vocab;
    auto expect = [this](const std::string& name, Shape shape) {
        if (params_.get(name).shape() != shape)
            throw DimensionError("parameter '" + name + "' has shape " + shape_str(params_.get(name).shape()) +
                                 ", expected " + shape_str(shape));
    };
    expect("embed", {V, H});
    expect("lm_head", {H, V});
    for (std::size_t l = 0; l < config_.layers; ++l) {
        const std::string p = layer_prefix(l);
        expect(p + "attn.wq", {H, H});
        expect(p + "ffn.w_gate", {H, config_.ffn_hidden});
        if (config_.block_kind(l) == BlockKind::residual_moe) {
            expect(p + "moe.router", {H, config_.router.num_experts});
            for (std::size_t e = 0; e < config_.router.num_experts; ++e)
                expect(p + "moe.expert" + std::to_string(e) + ".w_out", {config_.ffn_hidden, H});
        }
    }
}

Model Model::initialize(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    const double proj_std = 0.02 / std::sqrt(static_cast<double>(config.layers));
    auto normal = [&rng](Shape shape, double stddev) {
        Tensor t(std::move(shape));
        std::normal_distribution<double> dist(0.0, stddev);
        for (double& v : t.data()) v = dist(rng);
        return t;
    };
    const std::size_t H = config.hidden, F = config.ffn_hidden, V = config.vocab, E = config.router.num_experts;
    ParameterStore ps;
    ps.set("embed", normal({V, H}, 0.02));
    for (std::size_t l = 0; l < config.layers; ++l) {
        const std::string p = layer_prefix(l);
        ps.set(p + "attn_norm.gain", Tensor(Shape{H}, 1.0));
        ps.set(p + "attn_norm.bias", Tensor(Shape{H}, 0.0));
        for (const char* w : {"wq", "wk", "wv", "wo"}) ps.set(p + "attn." + w, normal({H, H}, proj_std));
        ps.set(p + "ffn_norm.gain", Tensor(Shape{H}, 1.0));
        ps.set(p + "ffn_norm.bias", Tensor(Shape{H}, 0.0));
        ps.set(p + "ffn.w_gate", normal({H, F}, proj_std));
        ps.set(p + "ffn.w_up", normal({H, F}, proj_std));
        ps.set(p + "ffn.w_out", normal({F, H}, proj_std));
        if (config.block_kind(l) == BlockKind::residual_moe) {
            ps.set(p + "moe.router", normal({H, E}, proj_std));
            for (std::size_t e = 0; e < E; ++e) {
                const std::string ep = p + "moe.expert" + std::to_string(e) + ".";
                ps.set(ep + "w_gate", normal({H, F}, proj_std));
                ps.set(ep + "w_up", normal({H, F}, proj_std));
                ps.set(ep + "w_out", normal({F, H}, proj_std));
            }
        }
    }
    ps.set("final_norm.gain", Tensor(Shape{H}, 1.0));
    ps.set("final_norm.bias", Tensor(Shape{H}, 0.0));
    ps.set("lm_head", normal({H, V}, proj_std));
    return Model(config, std::move(ps));
}

BoundParams Model::bind(ad::Tape& tape, bool requires_grad) const {
    BoundParams bound;
    for (const auto& [name, value] : params_) bound.emplace(name, tape.leaf(value, requires_grad));
    return bound;
}

BlockParams Model::block_params(const BoundParams& b, std::size_t layer) const {
    const std::string p = layer_prefix(layer);
    BlockParams bp;
    bp.attn = {b.at(p + "attn_norm.gain"), b.at(p + "attn_norm.bias"), b.at(p + "attn.wq"),
               b.at(p + "attn.wk"),        b.at(p + "attn.wv"),        b.at(p + "attn.wo")};
    bp.ffn_norm_gain = b.at(p + "ffn_norm.gain");
    bp.ffn_norm_bias = b.at(p + "ffn_norm.bias");
    bp.ffn = {b.at(p + "ffn.w_gate"), b.at(p + "ffn.w_up"), b.at(p + "ffn.w_out")};
    if (config_.block_kind(layer) == BlockKind::residual_moe) {
        MoeParams moe;
        moe.router = b.at(p + "moe.router");
        for (std::size_t e = 0; e < config_.router.num_experts; ++e) {
            const std::string ep = p + "moe.expert" + std::to_string(e) + ".";
            moe.experts.push_back({b.at(ep + "w_gate"), b.at(ep + "w_up"), b.at(ep + "w_out")});
        }
        bp.moe = std::move(moe);
    }
    return bp;
}

ForwardResult Model::forward(const BoundParams& bound, const Batch& batch, const ForwardOptions& options) const {
    const std::size_t S = batch.num_seqs, T = batch.seq_len, N = S * T;
    if (S == 0 || T == 0) throw ContractError("forward: empty batch");
    if (T > config_.max_seq_len)
        throw ConfigError("forward: sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                          std::to_string(config_.max_seq_len));
    if (batch.tokens.size() != N) throw DimensionError("forward: token count does not match batch shape");
    for (int tok : batch.tokens)
        if (tok < 0 || static_cast<std::size_t>(tok) >= config_.vocab)
            throw DimensionError("forward: token id " + std::to_string(tok) + " outside vocabulary");

    BlockContext ctx;
    ctx.layout = {S, T, config_.heads, config_.head_dim, {}};
    if (config_.prefix_bidirectional && !batch.visible_prefix.empty()) ctx.layout.visible_prefix = batch.visible_prefix;
    ctx.positions.resize(N);
    for (std::size_t n = 0; n < N; ++n) ctx.positions[n] = n % T;
    ctx.router = config_.router;
    if (options.capacity_factor) ctx.router.capacity_factor = *options.capacity_factor;
    ctx.routing_group = T;
    ctx.rope_base = config_.rope_base;

    ForwardResult result;
    ad::Var x = ad::embedding(bound.at("embed"), batch.tokens);
    for (std::size_t l = 0; l < config_.layers; ++l) {
        BlockOutput out = block_forward(x, config_.block_kind(l), block_params(bound, l), ctx);
        x = out.x;
        if (!out.moe) continue;
        MoeOutput& moe = *out.moe;
        result.routed_assignments += moe.routing.kept.size();
        result.dropped_assignments += moe.routing.dropped();
        if (options.record_trace) {
            const std::size_t K = moe.routing.top_k;
            for (std::size_t s = 0; s < S; ++s) {
                const std::size_t len = batch.lengths.empty() ? T : batch.lengths[s];
                for (std::size_t p = 0; p < len; ++p) {
                    const std::size_t n = s * T + p;
                    TraceRow row;
                    row.seq_id = batch.seq_ids.empty() ? s : batch.seq_ids[s];
                    row.position = p;
                    row.token_id = batch.tokens[n];
                    row.domain = batch.domains.empty() ? std::string() : batch.domains[s];
                    row.layer = l;
                    row.experts.assign(moe.routing.topk_idx.begin() + static_cast<long>(n * K),
                                       moe.routing.topk_idx.begin() + static_cast<long>((n + 1) * K));
                    row.kept.assign(moe.routing.kept.begin() + static_cast<long>(n * K),
                                    moe.routing.kept.begin() + static_cast<long>((n + 1) * K));
                    result.trace.push_back(std::move(row));
                }
            }
        }
        result.aux.push_back({l, moe.balance_loss, moe.router_z_loss, std::move(moe.terms), std::move(moe.routing)});
    }
    x = ad::layer_norm(x, bound.at("final_norm.gain"), bound.at("final_norm.bias"));
    result.logits = ad::matmul(x, bound.at("lm_head"));
    return result;
}

}  // namespace omoe
