#pragma once

// Brute-force references for the MoE layer, shared by unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "omoe/autodiff.hpp"
#include "omoe/moe.hpp"

namespace omoe::testing {

// Independent capacity oracle: per expert, order its assignments by
// (position, rank) and keep the first C.
inline std::vector<std::uint8_t> capacity_oracle(const std::vector<std::size_t>& topk, std::size_t k, std::size_t experts,
                                          std::size_t capacity) {
    std::vector<std::uint8_t> kept(topk.size(), 0);
    for (std::size_t e = 0; e < experts; ++e) {
        std::vector<std::pair<std::size_t, std::size_t>> mine;  // (position, rank)
        for (std::size_t a = 0; a < topk.size(); ++a)
            if (topk[a] == e) mine.emplace_back(a / k, a % k);
        std::sort(mine.begin(), mine.end());
        for (std::size_t i = 0; i < mine.size() && i < capacity; ++i) kept[mine[i].first * k + mine[i].second] = 1;
    }
    return kept;
}

struct DenseExpert {
    Tensor w_gate, w_up, w_out;
};

// Straight-line SwiGLU on one row.
inline std::vector<double> dense_ffn(std::span<const double> x, const DenseExpert& e) {
    const std::size_t D = x.size(), F = e.w_gate.cols();
    std::vector<double> hidden(F), out(D, 0.0);
    for (std::size_t f = 0; f < F; ++f) {
        double g = 0.0, u = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
            g += x[d] * e.w_gate.at(d, f);
            u += x[d] * e.w_up.at(d, f);
        }
        hidden[f] = g / (1.0 + std::exp(-g)) * u;
    }
    for (std::size_t d = 0; d < D; ++d)
        for (std::size_t f = 0; f < F; ++f) out[d] += hidden[f] * e.w_out.at(f, d);
    return out;
}

// Dense reference: every expert evaluated on every token, combined with gate
// values masked to the kept top-K assignments.
inline Tensor dense_moe_oracle(const Tensor& x, const Tensor& router, const std::vector<DenseExpert>& experts,
                        const RouterConfig& cfg) {
    const std::size_t B = x.rows(), D = x.cols(), E = experts.size();
    Tensor logits(Shape{B, E});
    for (std::size_t t = 0; t < B; ++t)
        for (std::size_t e = 0; e < E; ++e)
            for (std::size_t d = 0; d < D; ++d) logits.at(t, e) += x.at(t, d) * router.at(d, e);
    Tensor probs = ad::softmax_rows(logits);
    std::vector<std::size_t> topk;
    for (std::size_t t = 0; t < B; ++t) {
        std::vector<std::size_t> order(E);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return probs.at(t, a) > probs.at(t, b); });
        topk.insert(topk.end(), order.begin(), order.begin() + static_cast<long>(cfg.top_k));
    }
    const auto kept = capacity_oracle(topk, cfg.top_k, E, cfg.capacity(B));
    Tensor mask(Shape{B, E});
    for (std::size_t a = 0; a < topk.size(); ++a)
        if (kept[a]) mask.at(a / cfg.top_k, topk[a]) = 1.0;
    Tensor y(Shape{B, D});
    for (std::size_t t = 0; t < B; ++t)
        for (std::size_t e = 0; e < E; ++e) {
            const auto h = dense_ffn(x.row(t), experts[e]);
            const double g = mask.at(t, e) * probs.at(t, e);
            for (std::size_t d = 0; d < D; ++d) y.at(t, d) += g * h[d];
        }
    return y;
}

}  // namespace omoe::testing
