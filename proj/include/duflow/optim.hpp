#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "duflow/error.hpp"
#include "duflow/graph.hpp"
#include "duflow/tensor.hpp"

namespace duflow {

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct AdamState {
    std::vector<Tensor4<T>> m;
    std::vector<Tensor4<T>> v;
    std::int64_t step = 0;
};

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_global_norm(std::span<Parameter<T> *const> params, double max_norm) {
    double sq = 0.0;
    for (const auto *p : params)
        for (std::size_t i = 0; i < p->grad.size(); ++i) sq += static_cast<double>(p->grad[i]) * p->grad[i];
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const T k = static_cast<T>(max_norm / norm);
        for (auto *p : params)
            for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] *= k;
    }
    return norm;
}

/// Bias-corrected adaptive-moment update. A non-finite gradient aborts with
/// the index of the step that would have been taken.
template <typename T>
void adam_step(std::span<Parameter<T> *const> params, AdamState<T> &state, const AdamConfig &cfg) {
    if (state.m.empty()) {
        for (const auto *p : params) {
            state.m.emplace_back(p->value.shape());
            state.v.emplace_back(p->value.shape());
        }
    }
    if (state.m.size() != params.size()) throw Error(ErrorCode::ShapeMismatch, "optimizer state does not match parameters");
    for (std::size_t k = 0; k < params.size(); ++k) {
        require_same_shape(state.m[k].shape(), params[k]->value.shape(), "optimizer moment");
        if (!params[k]->grad.all_finite())
            throw Error(ErrorCode::NonFinite, "non-finite gradient in " + params[k]->name + " at step " +
                                                  std::to_string(state.step + 1));
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(cfg.beta1, t)));
    const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(cfg.beta2, t)));
    const T lr = static_cast<T>(cfg.learning_rate), eps = static_cast<T>(cfg.eps);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto &p = *params[k];
        auto &m = state.m[k];
        auto &v = state.v[k];
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const T g = p.grad[i];
            m[i] = b1 * m[i] + (T(1) - b1) * g;
            v[i] = b2 * v[i] + (T(1) - b2) * g * g;
            const T mhat = m[i] * c1;
            const T vhat = v[i] * c2;
            p.value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

}  // namespace duflow
