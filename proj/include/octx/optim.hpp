#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "octx/tensor.hpp"

namespace octx {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::uint64_t step = 0;
};

struct MomentumState {
    std::vector<std::vector<double>> velocity;
};

namespace detail {

template <typename T>
void check_step_shapes(const std::vector<BasicTensor<T>>& params, const std::vector<BasicTensor<double>>& grads) {
    if (params.size() != grads.size()) throw DimensionError("optimizer: parameter/gradient count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i)
        require_shape(grads[i].shape(), params[i].shape(), "optimizer gradient " + std::to_string(i));
}

inline bool all_zero(const std::vector<BasicTensor<double>>& grads) {
    for (const auto& g : grads)
        for (double v : g.data())
            if (v != 0.0) return false;
    return true;
}

inline void ensure_slots(std::vector<std::vector<double>>& s, const std::vector<BasicTensor<double>>& grads) {
    if (s.size() == grads.size()) return;
    s.clear();
    for (const auto& g : grads) s.emplace_back(g.size(), 0.0);
}

}  // namespace detail

// Bias-corrected Adam. An all-zero gradient set is a no-op: neither the
// parameters nor the moment estimates move.
template <typename T>
void adam_step(std::vector<BasicTensor<T>>& params, const std::vector<BasicTensor<double>>& grads, AdamState& state,
               double lr, const AdamConfig& cfg = {}) {
    detail::check_step_shapes(params, grads);
    if (detail::all_zero(grads)) return;
    detail::ensure_slots(state.m, grads);
    detail::ensure_slots(state.v, grads);
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& m = state.m[k];
        auto& v = state.v[k];
        const auto& g = grads[k];
        auto& p = params[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mh = m[i] / c1, vh = v[i] / c2;
            p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * mh / (std::sqrt(vh) + cfg.epsilon));
        }
    }
}

// v <- momentum * v + g; p <- p - lr * v. With momentum 0 this is plain SGD.
template <typename T>
void sgd_momentum_step(std::vector<BasicTensor<T>>& params, const std::vector<BasicTensor<double>>& grads,
                       MomentumState& state, double lr, double momentum = 0.9) {
    detail::check_step_shapes(params, grads);
    if (detail::all_zero(grads)) return;
    detail::ensure_slots(state.velocity, grads);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& vel = state.velocity[k];
        auto& p = params[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            vel[i] = momentum * vel[i] + grads[k][i];
            p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * vel[i]);
        }
    }
}

}  // namespace octx
