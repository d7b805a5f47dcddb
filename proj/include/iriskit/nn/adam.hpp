#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "iriskit/nn/autograd.hpp"
#include "iriskit/nn/tensor.hpp"

namespace iriskit::nn {

// Bias-corrected Adam. Hyperparameters beyond the learning rate default to
// beta1=0.9, beta2=0.999, epsilon=1e-8.
template <typename T>
struct AdamStateT {
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T epsilon = T(1e-8);
    std::int64_t step_count = 0;
    std::vector<TensorT<T>> first_moment;
    std::vector<TensorT<T>> second_moment;
};

using AdamState = AdamStateT<float>;

// One update over all parameters; each parameter's gradient must already be
// accumulated (zero for unused parameters). Moment tensors are allocated on
// the first step and shape-checked thereafter.
template <typename T>
void adam_step(std::vector<VarT<T>>& params, AdamStateT<T>& state, T lr) {
    if (lr <= T(0)) throw ValueError("adam_step: learning rate must be positive");
    if (state.first_moment.empty()) {
        state.first_moment.reserve(params.size());
        state.second_moment.reserve(params.size());
        for (const auto& p : params) {
            state.first_moment.emplace_back(TensorT<T>::zeros(p.shape()));
            state.second_moment.emplace_back(TensorT<T>::zeros(p.shape()));
        }
    }
    if (state.first_moment.size() != params.size()) {
        throw DimensionError("adam_step: state holds " +
                             std::to_string(state.first_moment.size()) +
                             " moment tensors for " + std::to_string(params.size()) +
                             " parameters");
    }

    state.step_count += 1;
    const T bc1 = T(1) - std::pow(state.beta1, static_cast<T>(state.step_count));
    const T bc2 = T(1) - std::pow(state.beta2, static_cast<T>(state.step_count));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        TensorT<T>& value = params[pi].tensor();
        const TensorT<T>& grad = params[pi].grad();
        TensorT<T>& m = state.first_moment[pi];
        TensorT<T>& v = state.second_moment[pi];
        if (!m.same_shape(value)) {
            throw DimensionError("adam_step: moment shape " + m.shape_string() +
                                 " does not match parameter shape " + value.shape_string());
        }
        require_same_shape(grad, value, "adam_step gradient");
        const std::size_t n = value.size();
        for (std::size_t i = 0; i < n; ++i) {
            const T g = grad[i];
            m[i] = state.beta1 * m[i] + (T(1) - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (T(1) - state.beta2) * g * g;
            const T mhat = m[i] / bc1;
            const T vhat = v[i] / bc2;
            value[i] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
        }
    }
}

} // namespace iriskit::nn
