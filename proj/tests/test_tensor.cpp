#include <doctest.h>

#include <cmath>

#include "tadlab/tensor.hpp"

using namespace tadlab;

namespace {

// independent per-coordinate check with a floor for near-zero entries
template <class S>
void require_close_grads(const std::vector<S>& got, const std::vector<S>& want, double rel_tol,
                         double floor = 1e-9) {
    REQUIRE(got.size() == want.size());
    for (size_t i = 0; i < got.size(); ++i) {
        double denom = std::max({std::abs(double(got[i])), std::abs(double(want[i])), floor});
        REQUIRE(std::abs(double(got[i]) - double(want[i])) / denom < rel_tol);
    }
}

}  // namespace

TEST_CASE("backward: linear loss gives all-ones gradient") {
    auto p = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}).set_requires_grad(true);
    auto loss = sum(p);
    backward(loss);
    for (float g : p.grad()) CHECK(g == 1.0f);
}

TEST_CASE("backward: constant loss leaves gradients zero") {
    auto p = Tensor::from({4}, {1, 2, 3, 4}).set_requires_grad(true);
    auto c = Tensor::scalar(5.0f);
    backward(c);
    for (float g : p.grad()) CHECK(g == 0.0f);
}

TEST_CASE("backward: rejects non-scalar and non-finite losses") {
    auto p = Tensor::from({2}, {1, 2}).set_requires_grad(true);
    CHECK_THROWS_AS(backward(add(p, p)), ShapeError);
    auto bad = Tensor::scalar(std::numeric_limits<float>::quiet_NaN());
    CHECK_THROWS_AS(backward(bad), NumericError);
}

TEST_CASE("cross entropy gradient equals softmax minus onehot") {
    auto logits = TensorT<double>::from({1, 3}, {1.0, 0.0, -1.0}).set_requires_grad(true);
    auto loss = cross_entropy_rows(logits, {0});
    backward(loss);

    auto probs = softmax_row<double>(std::span<const double>(logits.data()));
    std::vector<double> want = {probs[0] - 1.0, probs[1], probs[2]};
    require_close_grads(logits.grad(), want, 1e-12);

    // and against the central-difference oracle at h=1e-3
    auto fd = finite_diff_grad([&] { return cross_entropy_rows(logits, {0}).item(); },
                               {logits}, 1e-3);
    require_close_grads(logits.grad(), fd[0], 1e-3);
    CHECK(loss.item() >= 0.0);
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<float> row(17);
        for (auto& v : row) v = float(rng.normal(0, 3));
        auto p = softmax_row<float>(row);
        double total = 0;
        for (float x : p) total += x;
        CHECK(std::abs(total - 1.0) < 1e-6);
    }
}

TEST_CASE("finite_diff_grad: quadratic and constant objectives") {
    auto p = TensorT<double>::from({1}, {3.0});
    auto grads = finite_diff_grad([&] { return p.data()[0] * p.data()[0]; }, {p}, 1e-3);
    CHECK(std::abs(grads[0][0] - 6.0) < 1e-5);

    auto flat = finite_diff_grad([&] { return 42.0; }, {p}, 1e-3);
    CHECK(flat[0][0] == 0.0);

    CHECK_THROWS_AS(finite_diff_grad([&] { return 0.0; }, {p}, 0.0), std::invalid_argument);
}

// random graphs touching every op: gather -> rmsnorm -> attention -> matmul
// (plain and transposed) -> silu -> cross entropy + scaled sum
TEST_CASE("backward matches finite differences on random small graphs") {
    for (uint64_t seed = 0; seed < 8; ++seed) {
        Rng rng(mix_seed(seed, 99));
        const int d = 8, vocab = 11;
        auto table = TensorT<double>::randn({vocab, d}, rng, 0.8).set_requires_grad(true);
        auto gain = TensorT<double>::randn({d}, rng, 0.3).set_requires_grad(true);
        auto wq = TensorT<double>::randn({d, d}, rng, 0.5).set_requires_grad(true);
        auto wk = TensorT<double>::randn({d, d}, rng, 0.5).set_requires_grad(true);
        auto wv = TensorT<double>::randn({d, d}, rng, 0.5).set_requires_grad(true);
        auto a_t = TensorT<double>::randn({3, d}, rng, 0.5).set_requires_grad(true);
        auto b = TensorT<double>::randn({3, vocab}, rng, 0.5).set_requires_grad(true);

        std::vector<int> ids = {1, 4, 7, 2, 9};
        std::vector<int> targets = {3, -1, 5, 0, -1};

        auto forward = [&] {
            auto x = rows(table, ids);
            auto n = rmsnorm(x, gain);
            auto att = causal_attention(matmul(n, wq), matmul(n, wk), matmul(n, wv), 2);
            auto low = matmul(matmul(att, a_t, false, true), b);  // T x vocab
            auto act = silu(low);
            auto ce = cross_entropy_rows(act, targets);
            return add(ce, scale(sum(att), 0.01));
        };

        auto loss = forward();
        backward(loss);

        std::vector<TensorT<double>> params = {table, gain, wq, wk, wv, a_t, b};
        auto fd = finite_diff_grad([&] { return forward().item(); }, params, 1e-3);
        for (size_t i = 0; i < params.size(); ++i) {
            require_close_grads(params[i].grad(), fd[i], 1e-3, 1e-6);
        }
    }
}

TEST_CASE("matmul transpose modes against hand results") {
    auto a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto b = Tensor::from({3, 2}, {7, 8, 9, 10, 11, 12});
    auto c = matmul(a, b);
    CHECK(c.data() == std::vector<float>{58, 64, 139, 154});

    auto at = Tensor::from({3, 2}, {1, 4, 2, 5, 3, 6});  // a^T
    auto c2 = matmul(at, b, true, false);
    CHECK(c2.data() == c.data());

    auto bt = Tensor::from({2, 3}, {7, 9, 11, 8, 10, 12});  // b^T
    auto c3 = matmul(a, bt, false, true);
    CHECK(c3.data() == c.data());

    CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("adam: zero gradients leave parameters unchanged") {
    std::vector<Tensor> params = {Tensor::from({3}, {1, 2, 3})};
    OptimizerState state;
    adam_init(state, params);
    std::vector<std::vector<float>> grads = {{0, 0, 0}};
    adam_step(params, grads, state);
    CHECK(params[0].data() == std::vector<float>{1, 2, 3});
    CHECK(state.step_count == 1);
}

TEST_CASE("adam: first step moves by about lr opposite the gradient sign") {
    std::vector<Tensor> params = {Tensor::from({2}, {0.5f, -0.25f})};
    OptimizerState state;
    state.learning_rate = 1e-2f;
    adam_init(state, params);
    std::vector<std::vector<float>> grads = {{0.7f, -0.3f}};
    adam_step(params, grads, state);
    // bias-corrected moments collapse to g and g^2, so the update is lr * sign(g)
    CHECK(params[0].data()[0] == doctest::Approx(0.5f - 1e-2f).epsilon(1e-4));
    CHECK(params[0].data()[1] == doctest::Approx(-0.25f + 1e-2f).epsilon(1e-4));
}

TEST_CASE("adam: two identical steps follow the moment recurrence") {
    std::vector<Tensor> params = {Tensor::from({1}, {1.0f})};
    OptimizerState state;
    state.learning_rate = 1e-3f;
    adam_init(state, params);
    std::vector<std::vector<float>> grads = {{0.4f}};
    adam_step(params, grads, state);
    adam_step(params, grads, state);
    CHECK(state.step_count == 2);

    // recompute the recurrence by hand
    double m = 0, v = 0, w = 1.0;
    for (int t = 1; t <= 2; ++t) {
        m = 0.9 * m + 0.1 * 0.4;
        v = 0.999 * v + 0.001 * 0.4 * 0.4;
        double mhat = m / (1 - std::pow(0.9, t));
        double vhat = v / (1 - std::pow(0.999, t));
        w -= 1e-3 * mhat / (std::sqrt(vhat) + 1e-8);
    }
    CHECK(params[0].data()[0] == doctest::Approx(float(w)).epsilon(1e-5));
    CHECK(state.m[0][0] == doctest::Approx(float(m)).epsilon(1e-5));
    CHECK(state.v[0][0] == doctest::Approx(float(v)).epsilon(1e-5));
}

TEST_CASE("adam: shape mismatch is rejected") {
    std::vector<Tensor> params = {Tensor::from({3}, {1, 2, 3})};
    OptimizerState state;
    adam_init(state, params);
    std::vector<std::vector<float>> grads = {{1.0f, 2.0f}};
    CHECK_THROWS_AS(adam_step(params, grads, state), ShapeError);
}

TEST_CASE("ops are deterministic given identical inputs") {
    Rng rng(11);
    auto a = Tensor::randn({6, 6}, rng, 1.0);
    auto b = Tensor::randn({6, 6}, rng, 1.0);
    CHECK(matmul(a, b).data() == matmul(a, b).data());
    CHECK(silu(a).data() == silu(a).data());
}

TEST_CASE("no-grad mode skips graph recording") {
    auto p = Tensor::from({2}, {1, 2}).set_requires_grad(true);
    NoGradGuard guard;
    auto out = scale(p, 2.0f);
    CHECK(out.node()->parents.empty());
    CHECK_FALSE(out.node()->backward_fn);
}
