#pragma once

// Shared oracles for unit tests: central finite differences and random
// tensors. Independent of the backward pass they check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "omoe/autodiff.hpp"

namespace omoe::testing {

using LossBuilder = std::function<ad::Var(ad::Tape&, std::span<const ad::Var>)>;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, scale);
    for (double& v : t.data()) v = dist(rng);
    return t;
}

inline double evaluate(const LossBuilder& build, const std::vector<Tensor>& inputs) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const Tensor& t : inputs) vars.push_back(tape.leaf(t, true));
    return build(tape, vars).value().item();
}

inline std::vector<Tensor> analytic_grads(const LossBuilder& build, const std::vector<Tensor>& inputs) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const Tensor& t : inputs) vars.push_back(tape.leaf(t, true));
    ad::GradientMap grads = tape.backward(build(tape, vars));
    std::vector<Tensor> out;
    for (const ad::Var& v : vars) out.push_back(grads.at(v));
    return out;
}

/// Relative error with an absolute floor so that exact zeros compare sanely.
inline double rel_err(double a, double b, double floor = 1e-8) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Largest relative error between backward() and central differences.
inline double max_grad_error(const LossBuilder& build, std::vector<Tensor> inputs, double h = 1e-5) {
    const auto grads = analytic_grads(build, inputs);
    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i)
        for (std::size_t j = 0; j < inputs[i].numel(); ++j) {
            const double saved = inputs[i][j];
            inputs[i][j] = saved + h;
            const double up = evaluate(build, inputs);
            inputs[i][j] = saved - h;
            const double down = evaluate(build, inputs);
            inputs[i][j] = saved;
            worst = std::max(worst, rel_err(grads[i][j], (up - down) / (2 * h)));
        }
    return worst;
}

}  // namespace omoe::testing
