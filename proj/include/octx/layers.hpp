#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "octx/tensor.hpp"

namespace octx {

struct ConvSpec {
    std::size_t kernel_h = 1;
    std::size_t kernel_w = 1;
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::size_t stride = 1;
    std::size_t padding = 0;

    void validate() const {
        if (kernel_h < 1 || kernel_w < 1) throw ParameterError("conv kernel dims must be >= 1");
        if (stride < 1) throw ParameterError("conv stride must be >= 1");
        if (in_channels < 1 || out_channels < 1) throw ParameterError("conv channel counts must be >= 1");
    }
    Shape weight_shape() const { return {kernel_h, kernel_w, in_channels, out_channels}; }
    std::size_t param_count() const { return kernel_h * kernel_w * in_channels * out_channels + out_channels; }
};

struct PoolSpec {
    std::size_t window = 3;
    std::size_t stride = 2;
};

enum class Mode { train, eval };

// floor((in + 2p - k) / s) + 1
inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                                   const char* axis) {
    if (in + 2 * pad < k)
        throw DimensionError(std::string("axis ") + axis + ": extent " + std::to_string(in) + " (+2*" +
                             std::to_string(pad) + " padding) smaller than kernel " + std::to_string(k));
    return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

inline void check_conv_operands(const Shape& in, const Shape& w, const Shape& b, const ConvSpec& spec) {
    spec.validate();
    require_rank(in, 3, "conv2d input");
    if (in[2] != spec.in_channels)
        throw DimensionError("conv2d input axis 2 (channels): expected " + std::to_string(spec.in_channels) +
                             ", got " + std::to_string(in[2]));
    require_shape(w, spec.weight_shape(), "conv2d weights");
    require_shape(b, {spec.out_channels}, "conv2d bias");
}

}  // namespace detail

namespace detail {

// C[M x N] += A[M x K] * B[K x N], all row-major, accumulating in Acc. The
// MR x NR tile of C lives in locals so the compiler can keep it in vector
// registers; edges fall back to the same loop with runtime bounds.
template <typename Acc, typename TA, typename TB>
void gemm_acc(std::size_t M, std::size_t N, std::size_t K, const TA* A, std::size_t lda, const TB* B,
              std::size_t ldb, Acc* C, std::size_t ldc) {
    constexpr std::size_t MR = 6;
    constexpr std::size_t NR = 128 / sizeof(Acc);
    std::size_t j0 = 0;
    for (; j0 + NR <= N; j0 += NR) {
        std::size_t i0 = 0;
        for (; i0 + MR <= M; i0 += MR) {
            Acc acc[MR][NR];
#pragma GCC unroll 8
            for (std::size_t i = 0; i < MR; ++i)
#pragma omp simd
                for (std::size_t j = 0; j < NR; ++j) acc[i][j] = C[(i0 + i) * ldc + j0 + j];
            for (std::size_t k = 0; k < K; ++k) {
                const TB* b = B + k * ldb + j0;
#pragma GCC unroll 8
                for (std::size_t i = 0; i < MR; ++i) {
                    const Acc a = static_cast<Acc>(A[(i0 + i) * lda + k]);
#pragma omp simd
                    for (std::size_t j = 0; j < NR; ++j) acc[i][j] += a * static_cast<Acc>(b[j]);
                }
            }
#pragma GCC unroll 8
            for (std::size_t i = 0; i < MR; ++i)
#pragma omp simd
                for (std::size_t j = 0; j < NR; ++j) C[(i0 + i) * ldc + j0 + j] = acc[i][j];
        }
        for (; i0 < M; ++i0) {
            Acc acc[NR];
            for (std::size_t j = 0; j < NR; ++j) acc[j] = C[i0 * ldc + j0 + j];
            for (std::size_t k = 0; k < K; ++k) {
                const Acc a = static_cast<Acc>(A[i0 * lda + k]);
                const TB* b = B + k * ldb + j0;
#pragma omp simd
                for (std::size_t j = 0; j < NR; ++j) acc[j] += a * static_cast<Acc>(b[j]);
            }
            for (std::size_t j = 0; j < NR; ++j) C[i0 * ldc + j0 + j] = acc[j];
        }
    }
    if (j0 < N) {
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t k = 0; k < K; ++k) {
                const Acc a = static_cast<Acc>(A[i * lda + k]);
                for (std::size_t j = j0; j < N; ++j) C[i * ldc + j] += a * static_cast<Acc>(B[k * ldb + j]);
            }
    }
}

// One output row of patches: row[ox][(ky*kw + kx)*C + c], zero outside the
// input. Matches the kh x kw x C x F weight layout read as K x F.
template <typename T>
void im2col_row(const T* in, std::size_t H, std::size_t W, std::size_t C, const ConvSpec& spec, std::size_t oy,
                std::size_t OW, T* row) {
    const std::size_t kh = spec.kernel_h, kw = spec.kernel_w, s = spec.stride, K = kh * kw * C;
    const long p = static_cast<long>(spec.padding);
    for (std::size_t ox = 0; ox < OW; ++ox) {
        T* dst = row + ox * K;
        for (std::size_t ky = 0; ky < kh; ++ky) {
            const long iy = static_cast<long>(oy * s + ky) - p;
            for (std::size_t kx = 0; kx < kw; ++kx) {
                const long ix = static_cast<long>(ox * s + kx) - p;
                T* d = dst + (ky * kw + kx) * C;
                if (iy < 0 || iy >= static_cast<long>(H) || ix < 0 || ix >= static_cast<long>(W)) {
                    std::fill(d, d + C, T{});
                } else {
                    const T* src = in + (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * C;
                    std::copy(src, src + C, d);
                }
            }
        }
    }
}

}  // namespace detail

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weights, const BasicTensor<T>& bias,
                      const ConvSpec& spec) {
    detail::check_conv_operands(input.shape(), weights.shape(), bias.shape(), spec);
    const std::size_t H = input.dim(0), W = input.dim(1), C = spec.in_channels, F = spec.out_channels;
    const std::size_t K = spec.kernel_h * spec.kernel_w * C;
    const std::size_t OH = conv_out_extent(H, spec.kernel_h, spec.stride, spec.padding, "0 (height)");
    const std::size_t OW = conv_out_extent(W, spec.kernel_w, spec.stride, spec.padding, "1 (width)");

    BasicTensor<T> out({OH, OW, F});
    std::vector<T> row(OW * K);
    for (std::size_t oy = 0; oy < OH; ++oy) {
        detail::im2col_row(input.raw(), H, W, C, spec, oy, OW, row.data());
        T* o = out.raw() + oy * OW * F;
        for (std::size_t ox = 0; ox < OW; ++ox) std::copy(bias.raw(), bias.raw() + F, o + ox * F);
        detail::gemm_acc<T>(OW, F, K, row.data(), K, weights.raw(), F, o, F);
    }
    return out;
}

// Accumulates d(sum(upstream * conv2d(input)))/d(weights, bias) into grad_w and
// grad_b (64-bit accumulators for float storage). grad_input may be null when the
// caller does not need it (first layer of a network).
template <typename T, typename G>
void conv2d_grad_accumulate(const BasicTensor<T>& input, const BasicTensor<T>& weights, const ConvSpec& spec,
                            const BasicTensor<T>& upstream, BasicTensor<T>* grad_input, BasicTensor<G>& grad_w,
                            BasicTensor<G>& grad_b) {
    detail::check_conv_operands(input.shape(), weights.shape(), {spec.out_channels}, spec);
    const std::size_t H = input.dim(0), W = input.dim(1), C = spec.in_channels, F = spec.out_channels;
    const std::size_t kh = spec.kernel_h, kw = spec.kernel_w, s = spec.stride;
    const std::size_t K = kh * kw * C;
    const long p = static_cast<long>(spec.padding);
    const std::size_t OH = conv_out_extent(H, kh, s, spec.padding, "0 (height)");
    const std::size_t OW = conv_out_extent(W, kw, s, spec.padding, "1 (width)");
    require_shape(upstream.shape(), {OH, OW, F}, "conv2d_grad upstream");
    require_shape(grad_w.shape(), spec.weight_shape(), "conv2d_grad grad_weights");
    require_shape(grad_b.shape(), {F}, "conv2d_grad grad_bias");
    if (grad_input) {
        if (grad_input->shape() != input.shape()) *grad_input = BasicTensor<T>(input.shape());
        else grad_input->fill(T{});
    }

    // Weights as F x K for the input-gradient product.
    std::vector<T> wt_t;
    if (grad_input) {
        wt_t.resize(F * K);
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t f = 0; f < F; ++f) wt_t[f * K + k] = weights[k * F + f];
    }
    std::vector<T> row(OW * K);
    std::vector<G> patch_t(K * OW);  // live pixels only, K x P
    std::vector<G> gup(OW * F);      // live pixels only, P x F
    std::vector<G> gpatch;
    std::vector<std::size_t> live;

    for (std::size_t oy = 0; oy < OH; ++oy) {
        // Pixels whose upstream gradient is all zero contribute nothing
        // (common behind ReLU); skip them.
        live.clear();
        for (std::size_t ox = 0; ox < OW; ++ox) {
            const T* g = upstream.raw() + (oy * OW + ox) * F;
            bool any = false;
            for (std::size_t f = 0; f < F; ++f) any |= g[f] != T{};
            if (any) live.push_back(ox);
        }
        if (live.empty()) continue;
        const std::size_t P = live.size();
        detail::im2col_row(input.raw(), H, W, C, spec, oy, OW, row.data());
        for (std::size_t q = 0; q < P; ++q) {
            const T* g = upstream.raw() + (oy * OW + live[q]) * F;
            for (std::size_t f = 0; f < F; ++f) {
                gup[q * F + f] = static_cast<G>(g[f]);
                grad_b[f] += static_cast<G>(g[f]);
            }
            const T* r = row.data() + live[q] * K;
            for (std::size_t k = 0; k < K; ++k) patch_t[k * P + q] = static_cast<G>(r[k]);
        }
        detail::gemm_acc<G>(K, F, P, patch_t.data(), P, gup.data(), F, grad_w.raw(), F);

        if (grad_input) {
            gpatch.assign(P * K, G{});
            detail::gemm_acc<G>(P, K, F, gup.data(), F, wt_t.data(), K, gpatch.data(), K);
            T* gi = grad_input->raw();
            for (std::size_t q = 0; q < P; ++q) {
                const std::size_t ox = live[q];
                const G* gp = gpatch.data() + q * K;
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    const long iy = static_cast<long>(oy * s + ky) - p;
                    if (iy < 0 || iy >= static_cast<long>(H)) continue;
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const long ix = static_cast<long>(ox * s + kx) - p;
                        if (ix < 0 || ix >= static_cast<long>(W)) continue;
                        T* gpx = gi + (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * C;
                        const G* src = gp + (ky * kw + kx) * C;
                        for (std::size_t c = 0; c < C; ++c) gpx[c] = static_cast<T>(static_cast<G>(gpx[c]) + src[c]);
                    }
                }
            }
        }
    }
}

template <typename T>
struct ConvGrads {
    BasicTensor<T> grad_input;
    BasicTensor<double> grad_weights;
    BasicTensor<double> grad_bias;
};

template <typename T>
ConvGrads<T> conv2d_grad(const BasicTensor<T>& input, const BasicTensor<T>& weights, const ConvSpec& spec,
                         const BasicTensor<T>& upstream) {
    ConvGrads<T> r{BasicTensor<T>(input.shape()), BasicTensor<double>(spec.weight_shape()),
                   BasicTensor<double>({spec.out_channels})};
    conv2d_grad_accumulate(input, weights, spec, upstream, &r.grad_input, r.grad_weights, r.grad_bias);
    return r;
}

template <typename T>
struct PoolResult {
    BasicTensor<T> output;
    // Flat input index of the max for every output element.
    std::vector<std::uint32_t> argmax;
};

template <typename T>
PoolResult<T> maxpool2d(const BasicTensor<T>& input, const PoolSpec& spec = {}) {
    require_rank(input.shape(), 3, "maxpool2d input");
    if (spec.window < 1 || spec.stride < 1) throw ParameterError("pool window and stride must be >= 1");
    const std::size_t H = input.dim(0), W = input.dim(1), C = input.dim(2);
    const std::size_t OH = conv_out_extent(H, spec.window, spec.stride, 0, "0 (height)");
    const std::size_t OW = conv_out_extent(W, spec.window, spec.stride, 0, "1 (width)");
    PoolResult<T> r{BasicTensor<T>({OH, OW, C}), std::vector<std::uint32_t>(OH * OW * C)};
    const T* in = input.raw();
    for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox)
            for (std::size_t c = 0; c < C; ++c) {
                std::size_t best = ((oy * spec.stride) * W + ox * spec.stride) * C + c;
                for (std::size_t ky = 0; ky < spec.window; ++ky)
                    for (std::size_t kx = 0; kx < spec.window; ++kx) {
                        const std::size_t idx = ((oy * spec.stride + ky) * W + ox * spec.stride + kx) * C + c;
                        if (in[idx] > in[best]) best = idx;
                    }
                const std::size_t o = (oy * OW + ox) * C + c;
                r.output[o] = in[best];
                r.argmax[o] = static_cast<std::uint32_t>(best);
            }
    return r;
}

template <typename T>
BasicTensor<T> maxpool2d_grad(const std::vector<std::uint32_t>& argmax, const BasicTensor<T>& upstream,
                              const Shape& input_shape) {
    if (argmax.size() != upstream.size())
        throw DimensionError("maxpool2d_grad: argmax map has " + std::to_string(argmax.size()) +
                             " entries, upstream has " + std::to_string(upstream.size()));
    BasicTensor<T> g(input_shape);
    for (std::size_t i = 0; i < argmax.size(); ++i) {
        if (argmax[i] >= g.size()) throw DimensionError("maxpool2d_grad: argmax index outside input shape");
        g[argmax[i]] += upstream[i];
    }
    return g;
}

// out[j] = b[j] + sum_i x[i] W[i, j]
template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& input, const BasicTensor<T>& weights, const BasicTensor<T>& bias) {
    require_rank(weights.shape(), 2, "dense weights");
    const std::size_t n = weights.dim(0), m = weights.dim(1);
    if (input.size() != n)
        throw DimensionError("dense: input length " + std::to_string(input.size()) + " != weight rows " +
                             std::to_string(n));
    require_shape(bias.shape(), {m}, "dense bias");
    BasicTensor<T> out({m});
    T* o = out.raw();
    for (std::size_t j = 0; j < m; ++j) o[j] = bias[j];
    const T* w = weights.raw();
    for (std::size_t i = 0; i < n; ++i) {
        const T v = input[i];
        if (v == T{}) continue;
        const T* wr = w + i * m;
#pragma omp simd
        for (std::size_t j = 0; j < m; ++j) o[j] += v * wr[j];
    }
    return out;
}

template <typename T, typename G>
void dense_grad_accumulate(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                           const BasicTensor<T>& upstream, BasicTensor<T>* grad_input, BasicTensor<G>& grad_w,
                           BasicTensor<G>& grad_b) {
    require_rank(weights.shape(), 2, "dense_grad weights");
    const std::size_t n = weights.dim(0), m = weights.dim(1);
    if (input.size() != n) throw DimensionError("dense_grad: input length mismatch");
    if (upstream.size() != m) throw DimensionError("dense_grad: upstream length mismatch");
    require_shape(grad_w.shape(), weights.shape(), "dense_grad grad_weights");
    require_shape(grad_b.shape(), {m}, "dense_grad grad_bias");
    std::vector<G> g(m);
    for (std::size_t j = 0; j < m; ++j) {
        g[j] = static_cast<G>(upstream[j]);
        grad_b[j] += g[j];
    }
    if (grad_input && grad_input->size() != n) *grad_input = BasicTensor<T>(input.shape());
    const T* w = weights.raw();
    G* gw = grad_w.raw();
    const G* gd = g.data();
    for (std::size_t i = 0; i < n; ++i) {
        const G v = static_cast<G>(input[i]);
        G* gwr = gw + i * m;
        if (v != G{}) {
#pragma omp simd
            for (std::size_t j = 0; j < m; ++j) gwr[j] += v * gd[j];
        }
        if (grad_input) {
            const T* wr = w + i * m;
            G dot{};
#pragma omp simd reduction(+ : dot)
            for (std::size_t j = 0; j < m; ++j) dot += static_cast<G>(wr[j]) * gd[j];
            (*grad_input)[i] = static_cast<T>(dot);
        }
    }
}

template <typename T>
ConvGrads<T> dense_grad(const BasicTensor<T>& input, const BasicTensor<T>& weights, const BasicTensor<T>& upstream) {
    ConvGrads<T> r{BasicTensor<T>(input.shape()), BasicTensor<double>(weights.shape()),
                   BasicTensor<double>({weights.dim(1)})};
    dense_grad_accumulate(input, weights, upstream, &r.grad_input, r.grad_weights, r.grad_bias);
    return r;
}

// NaN propagates rather than being clamped to zero.
template <typename T>
inline T relu(T x) {
    return x <= T{} ? T{} : x;
}

template <typename T>
inline T relu_derivative(T x) {
    return x > T{} ? T{1} : T{};
}

// Overflow-free in both tails.
template <typename T>
inline T sigmoid(T x) {
    if (x >= T{}) return T{1} / (T{1} + std::exp(-x));
    const T e = std::exp(x);
    return e / (T{1} + e);
}

template <typename T>
inline T sigmoid_derivative(T x) {
    const T s = sigmoid(x);
    return s * (T{1} - s);
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
    BasicTensor<T> y = x;
    for (auto& v : y.data()) v = relu(v);
    return y;
}

template <typename T>
void relu_inplace(BasicTensor<T>& x) {
    for (auto& v : x.data()) v = relu(v);
}

// upstream * 1[x > 0]; x may be the pre- or post-activation value.
template <typename T>
BasicTensor<T> relu_grad(const BasicTensor<T>& x, const BasicTensor<T>& upstream) {
    require_shape(upstream.shape(), x.shape(), "relu_grad");
    BasicTensor<T> g = upstream;
    for (std::size_t i = 0; i < g.size(); ++i)
        if (!(x[i] > T{})) g[i] = T{};
    return g;
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
    BasicTensor<T> y = x;
    for (auto& v : y.data()) v = sigmoid(v);
    return y;
}

template <typename T>
BasicTensor<T> sigmoid_grad(const BasicTensor<T>& x, const BasicTensor<T>& upstream) {
    require_shape(upstream.shape(), x.shape(), "sigmoid_grad");
    BasicTensor<T> g = upstream;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= sigmoid_derivative(x[i]);
    return g;
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace detail

// Counter-based uniform in [0, 1): value depends only on (seed, counter).
inline double counter_uniform(std::uint64_t seed, std::uint64_t counter) {
    const std::uint64_t h = detail::splitmix64(detail::splitmix64(seed) ^ (counter * 0xD1B54A32D192ED03ULL));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

inline void check_dropout_rate(double rate) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ParameterError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
}

// Per-element multiplier of inverted dropout: 0 with probability rate, else 1/(1-rate).
template <typename T>
std::vector<T> dropout_mask(std::size_t n, double rate, std::uint64_t seed) {
    check_dropout_rate(rate);
    std::vector<T> m(n, T{1});
    if (rate == 0.0) return m;
    const T keep = static_cast<T>(1.0 / (1.0 - rate));
    for (std::size_t i = 0; i < n; ++i) m[i] = counter_uniform(seed, i) < rate ? T{} : keep;
    return m;
}

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& input, double rate, Mode mode, std::uint64_t seed) {
    check_dropout_rate(rate);
    if (mode == Mode::eval || rate == 0.0) return input;
    BasicTensor<T> out = input;
    const auto m = dropout_mask<T>(input.size(), rate, seed);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= m[i];
    return out;
}

}  // namespace octx
