#include "omoe/moe.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "omoe/errors.hpp"

namespace omoe {

void RouterConfig::validate() const {
    if (num_experts == 0) throw ConfigError("router: num_experts must be positive");
    if (top_k == 0) throw ConfigError("router: top_k must be positive");
    if (top_k > num_experts)
        throw ConfigError("router: top_k=" + std::to_string(top_k) + " exceeds num_experts=" +
                          std::to_string(num_experts));
    if (!(capacity_factor > 0.0)) throw ConfigError("router: capacity_factor must be positive");
}

std::size_t RouterConfig::capacity(std::size_t group_tokens) const {
    const double raw = capacity_factor * static_cast<double>(group_tokens) * static_cast<double>(top_k) /
                       static_cast<double>(num_experts);
    // Tolerance absorbs representation error in products like (2/3)*6.
    const auto c = static_cast<std::size_t>(std::ceil(raw - 1e-9));
    return std::max(c, top_k);
}

std::size_t RouterOutput::dropped() const {
    return static_cast<std::size_t>(std::count(kept.begin(), kept.end(), std::uint8_t{0}));
}

std::vector<std::uint8_t> apply_capacity(std::span<const std::size_t> topk_idx, std::size_t top_k,
                                         std::size_t num_experts, std::size_t capacity) {
    if (top_k == 0 || topk_idx.size() % top_k != 0)
        throw DimensionError("apply_capacity: index list is not a whole number of top-k rows");
    // Row-major [B×K] storage is already position-then-rank order.
    std::vector<std::uint8_t> kept(topk_idx.size(), 0);
    std::vector<std::size_t> load(num_experts, 0);
    for (std::size_t a = 0; a < topk_idx.size(); ++a) {
        const std::size_t e = topk_idx[a];
        if (e >= num_experts) throw ContractError("apply_capacity: expert index out of range");
        if (load[e] < capacity) {
            ++load[e];
            kept[a] = 1;
        }
    }
    return kept;
}

std::vector<std::uint8_t> apply_capacity(std::span<const std::size_t> topk_idx, const RouterConfig& cfg) {
    cfg.validate();
    const std::size_t tokens = topk_idx.size() / cfg.top_k;
    return apply_capacity(topk_idx, cfg.top_k, cfg.num_experts, cfg.capacity(tokens));
}

ad::Var swiglu_ffn(ad::Var x, const FfnParams& p) {
    ad::Var gate = ad::silu(ad::matmul(x, p.w_gate));
    ad::Var up = ad::matmul(x, p.w_up);
    return ad::matmul(ad::mul(gate, up), p.w_out);
}

RoutedTokens route(ad::Var x, ad::Var router_weights, const RouterConfig& cfg, std::size_t group_size) {
    cfg.validate();
    const std::size_t B = x.value().rows();
    if (B == 0) throw ContractError("route: empty token batch");
    if (router_weights.shape().size() != 2 || router_weights.shape()[1] != cfg.num_experts)
        throw DimensionError("route: router weights " + shape_str(router_weights.shape()) + " do not map to " +
                             std::to_string(cfg.num_experts) + " experts");

    RoutedTokens routed;
    routed.logits = ad::matmul(x, router_weights);
    routed.probs = ad::softmax(routed.logits);

    RouterOutput& out = routed.decisions;
    out.logits = routed.logits.value();
    out.probs = routed.probs.value();
    out.tokens = B;
    out.top_k = cfg.top_k;
    out.num_experts = cfg.num_experts;
    out.topk_idx.reserve(B * cfg.top_k);
    out.gate_vals.reserve(B * cfg.top_k);
    for (std::size_t t = 0; t < B; ++t) {
        const auto row = out.probs.row(t);
        for (std::size_t e : ad::top_k_indices(row, cfg.top_k)) {
            out.topk_idx.push_back(e);
            out.gate_vals.push_back(row[e]);
        }
    }

    const std::size_t group = group_size == 0 ? B : group_size;
    out.kept.reserve(B * cfg.top_k);
    for (std::size_t start = 0; start < B; start += group) {
        const std::size_t len = std::min(group, B - start);
        std::span<const std::size_t> slice(out.topk_idx.data() + start * cfg.top_k, len * cfg.top_k);
        const auto kept = apply_capacity(slice, cfg.top_k, cfg.num_experts, cfg.capacity(len));
        out.kept.insert(out.kept.end(), kept.begin(), kept.end());
    }
    return routed;
}

RouterOutput route(const Tensor& x, const Tensor& router_weights, const RouterConfig& cfg) {
    ad::Tape tape;
    return route(tape.constant(x), tape.constant(router_weights), cfg).decisions;
}

BalanceLoss balance_loss(ad::Var probs, std::span<const std::size_t> topk_idx, std::size_t top_k) {
    const std::size_t B = probs.value().rows(), E = probs.value().cols();
    if (B == 0) throw ContractError("balance_loss: empty batch");
    if (top_k == 0 || topk_idx.size() != B * top_k)
        throw DimensionError("balance_loss: expected " + std::to_string(B) + "x" + std::to_string(top_k) +
                             " expert indices");
    BalanceLoss out;
    out.dispatch_fraction.assign(E, 0.0);
    for (std::size_t e : topk_idx) {
        if (e >= E) throw ContractError("balance_loss: expert index out of range");
        out.dispatch_fraction[e] += 1.0;
    }
    for (double& m : out.dispatch_fraction) m /= static_cast<double>(B);

    ad::Tape& tape = probs.tape();
    ad::Var mean_prob = ad::mean_rows(probs);
    out.mean_prob = mean_prob.value().values();
    ad::Var m = tape.constant(Tensor::vector(out.dispatch_fraction));
    out.value = ad::scale(ad::sum(ad::mul(m, mean_prob)), static_cast<double>(E) / static_cast<double>(top_k));
    return out;
}

ad::Var router_z_loss(ad::Var logits) {
    if (logits.value().rows() == 0) throw ContractError("router_z_loss: empty batch");
    return ad::mean(ad::square(ad::logsumexp(logits)));
}

MoeOutput moe_forward(ad::Var x, const MoeParams& params, const RouterConfig& cfg, std::size_t group_size) {
    cfg.validate();
    if (params.experts.size() != cfg.num_experts)
        throw DimensionError("moe_forward: " + std::to_string(params.experts.size()) + " expert parameter sets for " +
                             std::to_string(cfg.num_experts) + " experts");
    const std::size_t B = x.value().rows(), D = x.value().cols();
    for (const FfnParams& e : params.experts)
        if (e.w_gate.shape().size() != 2 || e.w_gate.shape()[0] != D || e.w_out.shape().size() != 2 ||
            e.w_out.shape()[1] != D)
            throw DimensionError("moe_forward: expert widths do not match model width " + std::to_string(D));

    RoutedTokens routed = route(x, params.router, cfg, group_size);
    const RouterOutput& dec = routed.decisions;

    ad::Tape& tape = x.tape();
    ad::Var y;
    for (std::size_t e = 0; e < cfg.num_experts; ++e) {
        std::vector<std::size_t> rows;
        for (std::size_t t = 0; t < B; ++t)
            for (std::size_t j = 0; j < cfg.top_k; ++j)
                if (dec.expert(t, j) == e && dec.is_kept(t, j)) rows.push_back(t);
        if (rows.empty()) continue;
        const std::vector<std::size_t> cols(rows.size(), e);
        ad::Var h = swiglu_ffn(ad::gather_rows(x, rows), params.experts[e]);
        ad::Var gates = ad::gather_elements(routed.probs, rows, cols);
        ad::Var contribution = ad::scatter_rows(ad::mul_col(h, gates), B, rows);
        y = y.valid() ? ad::add(y, contribution) : contribution;
    }
    if (!y.valid()) y = tape.constant(Tensor(Shape{B, D}, 0.0));

    BalanceLoss lb = balance_loss(routed.probs, dec.topk_idx, cfg.top_k);
    ad::Var lz = router_z_loss(routed.logits);

    MoeOutput out;
    out.y = y;
    out.balance_loss = lb.value;
    out.router_z_loss = lz;
    out.terms.dispatch_fraction = std::move(lb.dispatch_fraction);
    out.terms.mean_prob = std::move(lb.mean_prob);
    out.terms.balance_loss = lb.value.value().item();
    out.terms.router_z_loss = lz.value().item();
    out.routing = std::move(routed.decisions);
    return out;
}

double balance_loss_value(const Tensor& probs, std::span<const std::size_t> topk_idx, std::size_t top_k) {
    ad::Tape tape;
    return balance_loss(tape.constant(probs), topk_idx, top_k).value.value().item();
}

double router_z_loss_value(const Tensor& logits) {
    ad::Tape tape;
    return router_z_loss(tape.constant(logits)).value().item();
}

}  // namespace omoe
