#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "octx/tensor.hpp"

namespace octx {

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// |a - n| / max(|a|, |n|, floor)
inline double relative_error(double analytic, double numeric, double floor = 1e-7) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

// `count` distinct indices in [0, n), sorted, drawn with a fixed seed.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t count, std::uint64_t seed) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    if (count >= n) return all;
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(all[i], all[pick(rng)]);
    }
    all.resize(count);
    std::sort(all.begin(), all.end());
    return all;
}

// Central-difference check of `analytic` = df/dx at x. f takes the perturbed
// tensor by const reference and returns a double. Only `indices` are probed
// when given; otherwise every entry.
template <typename F, typename T>
GradCheckResult grad_check(F&& f, const BasicTensor<T>& x, const BasicTensor<double>& analytic, double eps = 1e-3,
                           std::span<const std::size_t> indices = {}, double floor = 1e-7) {
    require_shape(analytic.shape(), x.shape(), "grad_check analytic gradient");
    std::vector<std::size_t> all;
    if (indices.empty()) {
        all.resize(x.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        indices = all;
    }
    GradCheckResult r;
    BasicTensor<T> probe = x;
    for (std::size_t i : indices) {
        const T orig = probe[i];
        probe[i] = static_cast<T>(static_cast<double>(orig) + eps);
        const double fp = f(static_cast<const BasicTensor<T>&>(probe));
        probe[i] = static_cast<T>(static_cast<double>(orig) - eps);
        const double fm = f(static_cast<const BasicTensor<T>&>(probe));
        probe[i] = orig;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double err = relative_error(analytic[i], numeric, floor);
        if (err > r.max_relative_error || r.checked == 0) {
            r.max_relative_error = std::max(r.max_relative_error, err);
            r.worst_index = i;
            r.worst_analytic = analytic[i];
            r.worst_numeric = numeric;
        }
        ++r.checked;
    }
    return r;
}

}  // namespace octx
