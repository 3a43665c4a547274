#include "tadlab/tensor.hpp"

namespace tadlab {

void adam_init(OptimizerState& state, const std::vector<Tensor>& params) {
    state.step_count = 0;
    state.m.clear();
    state.v.clear();
    for (const auto& p : params) {
        state.m.emplace_back(p.size(), 0.0f);
        state.v.emplace_back(p.size(), 0.0f);
    }
}

void adam_step(std::vector<Tensor>& params, const std::vector<std::vector<float>>& grads,
               OptimizerState& state) {
    if (state.m.size() != params.size()) adam_init(state, params);
    if (grads.size() != params.size()) throw ShapeError("adam_step: grad count mismatch");
    state.step_count += 1;
    const double t = double(state.step_count);
    const double bc1 = 1.0 - std::pow(double(state.beta1), t);
    const double bc2 = 1.0 - std::pow(double(state.beta2), t);
    for (size_t i = 0; i < params.size(); ++i) {
        auto& w = params[i].data();
        const auto& g = grads[i];
        if (!g.empty() && g.size() != w.size())
            throw ShapeError("adam_step: grad shape mismatch for parameter " + std::to_string(i));
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != w.size())
            throw ShapeError("adam_step: moment shape mismatch for parameter " + std::to_string(i));
        for (size_t j = 0; j < w.size(); ++j) {
            float gj = g.empty() ? 0.0f : g[j];
            m[j] = state.beta1 * m[j] + (1.0f - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0f - state.beta2) * gj * gj;
            float mhat = float(double(m[j]) / bc1);
            float vhat = float(double(v[j]) / bc2);
            w[j] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
        }
    }
}

void adam_step(std::vector<Tensor>& params, OptimizerState& state) {
    std::vector<std::vector<float>> grads;
    grads.reserve(params.size());
    for (auto& p : params) grads.push_back(p.grad());
    adam_step(params, grads, state);
}

}  // namespace tadlab
