#include <doctest.h>

#include <cmath>
#include <random>

#include "omoe/autodiff.hpp"
#include "omoe/errors.hpp"
#include "test_support.hpp"

using namespace omoe;
using omoe::testing::max_grad_error;
using omoe::testing::random_tensor;

TEST_CASE("matmul values") {
    ad::Tape tape;
    auto a = tape.constant(Tensor::matrix({{1, 0}, {0, 1}}));
    auto b = tape.constant(Tensor::matrix({{3, 4}, {5, 6}}));
    CHECK(ad::matmul(a, b).value() == Tensor::matrix({{3, 4}, {5, 6}}));

    auto r = tape.constant(Tensor::matrix({{1, 2}}));
    auto c = tape.constant(Tensor::matrix({{3}, {4}}));
    CHECK(ad::matmul(r, c).value().item() == 11.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    ad::Tape tape;
    auto a = tape.constant(Tensor(Shape{2, 3}));
    auto b = tape.constant(Tensor(Shape{2, 3}));
    try {
        ad::matmul(a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient matches finite differences") {
    std::mt19937_64 rng(7);
    auto build = [](ad::Tape&, std::span<const ad::Var> v) { return ad::sum(ad::matmul(v[0], v[1])); };
    CHECK(max_grad_error(build, {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)}) < 1e-6);
}

TEST_CASE("softmax values") {
    ad::Tape tape;
    auto zeros = ad::softmax(tape.constant(Tensor::matrix({{0, 0, 0, 0}})));
    for (double p : zeros.value().data()) CHECK(p == doctest::Approx(0.25).epsilon(1e-15));

    const std::vector<double> logits{0.1, 0.3, 0.2, 0.4};
    auto y = ad::softmax(tape.constant(Tensor(Shape{1, 4}, logits)));
    double z = 0.0;
    for (double l : logits) z += std::exp(l);
    const double expected[] = {0.2138, 0.2612, 0.2363, 0.2887};
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(y.value()[i] == doctest::Approx(std::exp(logits[i]) / z).epsilon(1e-14));
        CHECK(std::abs(y.value()[i] - expected[i]) < 1e-4);
    }

    auto big = ad::softmax(tape.constant(Tensor::matrix({{1000, 0}})));
    CHECK(big.value()[0] == 1.0);
    CHECK(big.value()[1] == doctest::Approx(0.0).epsilon(1e-300));
    CHECK(std::isfinite(big.value()[1]));
}

TEST_CASE("softmax rejects NaN") {
    ad::Tape tape;
    auto x = tape.constant(Tensor::matrix({{0.0, std::nan("")}}));
    CHECK_THROWS_AS(ad::softmax(x), NumericError);
}

TEST_CASE("softmax rows sum to one and stay positive") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor x = random_tensor({5, 7}, rng, 10.0);
        Tensor y = ad::softmax_rows(x);
        for (std::size_t r = 0; r < 5; ++r) {
            double s = 0.0;
            for (double p : y.row(r)) {
                CHECK(p > 0.0);
                s += p;
            }
            CHECK(std::abs(s - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("backward on simple losses") {
    ad::Tape tape;
    auto x = tape.leaf(Tensor(Shape{2, 3}, 0.7));
    auto grads = tape.backward(ad::sum(x));
    for (double g : grads.at(x).data()) CHECK(g == 1.0);

    ad::Tape tape2;
    auto v = tape2.leaf(Tensor::vector({1, 2, 3}));
    auto g2 = tape2.backward(ad::sum(ad::mul(v, v)));
    CHECK(g2.at(v) == Tensor::vector({2, 4, 6}));
}

TEST_CASE("backward contract errors") {
    ad::Tape tape;
    auto x = tape.leaf(Tensor::vector({1, 2}));
    CHECK_THROWS_AS(tape.backward(x), ContractError);
    auto loss = ad::sum(x);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), ContractError);
}

TEST_CASE("constants never receive gradients and fan-out accumulates") {
    ad::Tape tape;
    auto w = tape.leaf(Tensor::vector({2.0}));
    auto c = tape.constant(Tensor::vector({5.0}));
    auto loss = ad::sum(ad::add(ad::mul(w, c), ad::mul(w, w)));
    auto grads = tape.backward(loss);
    CHECK(grads.at(w)[0] == doctest::Approx(5.0 + 4.0));
    CHECK_FALSE(grads.contains(c.id()));
}

TEST_CASE("backward is deterministic") {
    std::mt19937_64 rng(3);
    Tensor a = random_tensor({6, 5}, rng), b = random_tensor({5, 4}, rng);
    auto run = [&] {
        ad::Tape tape;
        auto va = tape.leaf(a), vb = tape.leaf(b);
        auto loss = ad::sum(ad::square(ad::softmax(ad::matmul(va, vb))));
        auto g = tape.backward(loss);
        return std::make_pair(g.at(va), g.at(vb));
    };
    CHECK(run() == run());
}

TEST_CASE("every differentiable op matches finite differences") {
    std::mt19937_64 rng(2024);
    using omoe::testing::LossBuilder;
    struct Case {
        const char* name;
        LossBuilder build;
        std::vector<Tensor> inputs;
    };
    // Each loss is made non-linear in the output so that gradients are not
    // all-ones.
    auto weighted = [](ad::Var y) {
        ad::Tape& t = y.tape();
        Tensor w(y.shape());
        for (std::size_t i = 0; i < w.numel(); ++i) w[i] = std::sin(0.37 * static_cast<double>(i) + 0.1);
        return ad::sum(ad::mul(y, t.constant(w)));
    };
    std::vector<Case> cases;
    cases.push_back({"add", [&](ad::Tape&, std::span<const ad::Var> v) { return weighted(ad::add(v[0], v[1])); },
                     {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)}});
    cases.push_back({"sub", [&](ad::Tape&, std::span<const ad::Var> v) { return weighted(ad::sub(v[0], v[1])); },
                     {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)}});
    cases.push_back({"mul", [&](ad::Tape&, std::span<const ad::Var> v) { return weighted(ad::mul(v[0], v[1])); },
                     {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)}});
    cases.push_back({"add_row", [&](ad::Tape&, std::span<const ad::Var> v) { return weighted(ad::add_row(v[0], v[1])); },
                     {random_tensor({3, 4}, rng), random_tensor({4}, rng)}});
    cases.push_back({"mul_row", [&](ad::Tape&, std::span<const ad::Var> v) { return weighted(ad::mul_row(v[0], v[1])); },
                     {random_tensor({3, 4}, rng), random_tensor({4}, rng)}});
    cases.push_back({"mul_col", [&](ad::Tape&, std::span<const ad::Var> v) { return weighted(ad::mul_col(v[0], v[1])); },
                     {random_tensor({3, 4}, rng), random_tensor({3}, rng)}});
    cases.push_back({"silu", [&](ad::Tape&, std::span<const ad::Var> v) { return weighted(ad::silu(v[0])); },
                     {random_tensor({3, 4}, rng)}});
    cases.push_back({"mean_rows", [&](ad::Tape&, std::span<const ad::Var> v) { return weighted(ad::mean_rows(v[0])); },
                     {random_tensor({3, 4}, rng)}});
    cases.push_back({"softmax", [&](ad::Tape&, std::span<const ad::Var> v) { return weighted(ad::softmax(v[0])); },
                     {random_tensor({3, 5}, rng)}});
    cases.push_back({"logsumexp", [&](ad::Tape&, std::span<const ad::Var> v) { return weighted(ad::logsumexp(v[0])); },
                     {random_tensor({3, 5}, rng)}});
    cases.push_back({"layer_norm",
                     [&](ad::Tape&, std::span<const ad::Var> v) { return weighted(ad::layer_norm(v[0], v[1], v[2])); },
                     {random_tensor({3, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)}});
    cases.push_back({"embedding",
                     [&](ad::Tape&, std::span<const ad::Var> v) {
                         const int ids[] = {2, 0, 2, 1};
                         return weighted(ad::embedding(v[0], ids));
                     },
                     {random_tensor({4, 3}, rng)}});
    cases.push_back({"scatter_rows",
                     [&](ad::Tape&, std::span<const ad::Var> v) {
                         const std::size_t rows[] = {3, 0, 3};
                         return weighted(ad::scatter_rows(v[0], 5, rows));
                     },
                     {random_tensor({3, 2}, rng)}});
    cases.push_back({"gather_elements",
                     [&](ad::Tape&, std::span<const ad::Var> v) {
                         const std::size_t rows[] = {0, 2, 2}, cols[] = {1, 0, 1};
                         return weighted(ad::gather_elements(v[0], rows, cols));
                     },
                     {random_tensor({3, 2}, rng)}});
    cases.push_back({"reshape+transpose",
                     [&](ad::Tape&, std::span<const ad::Var> v) {
                         return weighted(ad::transpose(ad::reshape(v[0], Shape{4, 3})));
                     },
                     {random_tensor({2, 6}, rng)}});
    cases.push_back({"slice/concat",
                     [&](ad::Tape&, std::span<const ad::Var> v) {
                         const ad::Var cols[] = {ad::slice_cols(v[0], 2, 2), ad::slice_cols(v[0], 0, 1)};
                         const ad::Var rows[] = {ad::slice_rows(v[0], 1, 2), ad::slice_rows(v[0], 0, 1)};
                         return ad::add(weighted(ad::concat_cols(cols)), weighted(ad::concat_rows(rows)));
                     },
                     {random_tensor({3, 4}, rng)}});
    cases.push_back({"cross_entropy",
                     [&](ad::Tape&, std::span<const ad::Var> v) {
                         const int labels[] = {1, -1, 4, 0};
                         return ad::cross_entropy(v[0], labels);
                     },
                     {random_tensor({4, 5}, rng)}});
    cases.push_back({"rope",
                     [&](ad::Tape&, std::span<const ad::Var> v) {
                         const std::size_t pos[] = {0, 3, 7};
                         return weighted(ad::rope(v[0], pos, 2, 4));
                     },
                     {random_tensor({3, 8}, rng)}});
    cases.push_back({"causal_attention",
                     [&](ad::Tape&, std::span<const ad::Var> v) {
                         ad::AttentionLayout layout{2, 3, 2, 2, {}};
                         return weighted(ad::causal_attention(v[0], v[1], v[2], layout));
                     },
                     {random_tensor({6, 4}, rng), random_tensor({6, 4}, rng), random_tensor({6, 4}, rng)}});
    cases.push_back({"prefix_attention",
                     [&](ad::Tape&, std::span<const ad::Var> v) {
                         ad::AttentionLayout layout{2, 3, 1, 4, {2, 0}};
                         return weighted(ad::causal_attention(v[0], v[1], v[2], layout));
                     },
                     {random_tensor({6, 4}, rng), random_tensor({6, 4}, rng), random_tensor({6, 4}, rng)}});
    for (auto& c : cases) {
        CAPTURE(c.name);
        CHECK(max_grad_error(c.build, c.inputs) < 1e-4);
    }
}

TEST_CASE("cross entropy with every position ignored is a contract error") {
    ad::Tape tape;
    auto logits = tape.leaf(Tensor(Shape{2, 3}));
    const int labels[] = {-1, -1};
    CHECK_THROWS_AS(ad::cross_entropy(logits, labels), ContractError);
}

TEST_CASE("top-k indices break ties toward the lower index") {
    const double row[] = {0.25, 0.25, 0.25, 0.25};
    CHECK(ad::top_k_indices(row, 2) == std::vector<std::size_t>{0, 1});
    const double row2[] = {0.1, 0.4, 0.1, 0.4};
    CHECK(ad::top_k_indices(row2, 3) == std::vector<std::size_t>{1, 3, 0});
    CHECK_THROWS_AS(ad::top_k_indices(row2, 5), ConfigError);
}
