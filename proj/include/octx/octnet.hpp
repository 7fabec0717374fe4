#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include "octx/classes.hpp"
#include "octx/layers.hpp"
#include "octx/tensor.hpp"

namespace octx {

inline constexpr std::size_t kImageSize = 224;
inline constexpr std::size_t kImageChannels = 3;

enum class LayerKind : std::uint8_t { conv = 1, maxpool = 2, dropout = 3, flatten = 4, dense = 5 };

enum class OutputHead : std::uint8_t { sigmoid = 0, softmax = 1 };

enum class LossKind { bce_sigmoid, softmax_ce };

struct LayerInfo {
    std::string name;
    LayerKind kind;
    Shape in_shape;
    Shape out_shape;
    std::size_t param_count = 0;
    ConvSpec conv{};           // conv only
    std::size_t dense_in = 0;  // dense only
    std::size_t dense_out = 0;
    bool relu = false;         // fused ReLU after conv/dense
    int param_slot = -1;       // index of the weight tensor in params(); bias is +1
};

struct NetConfig {
    double conv_dropout = 0.25;
    double dense_dropout = 0.5;
    OutputHead head = OutputHead::sigmoid;
};

// The fixed 14-row layer table: 4 conv (each followed by 3x3/2 max pooling),
// dropout, an extra pooling, flatten, two dense layers.
inline std::vector<LayerInfo> octnet_layer_table(const NetConfig& = {}) {
    auto conv = [](std::string name, Shape in, std::size_t k, std::size_t cout, std::size_t stride,
                   std::size_t pad, int slot) {
        LayerInfo l{std::move(name), LayerKind::conv, in, {}, 0};
        l.conv = ConvSpec{k, k, in[2], cout, stride, pad};
        l.out_shape = {conv_out_extent(in[0], k, stride, pad, "0"), conv_out_extent(in[1], k, stride, pad, "1"), cout};
        l.param_count = l.conv.param_count();
        l.relu = true;
        l.param_slot = slot;
        return l;
    };
    auto pool = [](Shape in) {
        LayerInfo l{"Max Pooling", LayerKind::maxpool, in, {}, 0};
        l.out_shape = {conv_out_extent(in[0], 3, 2, 0, "0"), conv_out_extent(in[1], 3, 2, 0, "1"), in[2]};
        return l;
    };
    auto dense = [](std::string name, std::size_t n, std::size_t m, bool relu, int slot) {
        LayerInfo l{std::move(name), LayerKind::dense, {n}, {m}, n * m + m};
        l.dense_in = n;
        l.dense_out = m;
        l.relu = relu;
        l.param_slot = slot;
        return l;
    };
    std::vector<LayerInfo> t;
    t.push_back(conv("Conv5D-64", {224, 224, 3}, 5, 64, 2, 0, 0));
    t.push_back(pool(t.back().out_shape));
    t.push_back(conv("Conv1D-32", t.back().out_shape, 1, 32, 1, 0, 2));
    t.push_back(pool(t.back().out_shape));
    t.push_back(conv("Conv1D-128", t.back().out_shape, 1, 128, 1, 0, 4));
    t.push_back(pool(t.back().out_shape));
    t.push_back(conv("Conv3D-128", t.back().out_shape, 3, 128, 1, 1, 6));
    t.push_back(pool(t.back().out_shape));
    t.push_back(LayerInfo{"Dropout", LayerKind::dropout, t.back().out_shape, t.back().out_shape, 0});
    t.push_back(pool(t.back().out_shape));
    t.push_back(LayerInfo{"Flatten", LayerKind::flatten, t.back().out_shape, {shape_size(t.back().out_shape)}, 0});
    t.push_back(dense("Dense 1", 512, 512, true, 8));
    t.push_back(LayerInfo{"Dropout", LayerKind::dropout, {512}, {512}, 0});
    t.push_back(dense("Dense 2", 512, kNumClasses, false, 10));
    return t;
}

// Index of the last conv layer (12x12x128 activation used by Grad-CAM).
inline constexpr std::size_t kLastConvLayer = 6;
inline constexpr std::size_t kParamTensorCount = 12;

template <typename T>
struct ForwardTrace {
    BasicTensor<T> input;
    std::vector<BasicTensor<T>> outputs;               // one per layer
    std::vector<std::vector<std::uint32_t>> argmax;    // pooling layers only
    std::vector<std::vector<T>> dropout_masks;         // train mode only
    BasicTensor<T> logits;
    BasicTensor<T> probs;

    const BasicTensor<T>& last_conv_activation() const { return outputs.at(kLastConvLayer); }
};

using ParamGrads = std::vector<BasicTensor<double>>;

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ splitmix64(b + 0x632BE59BD9B4E019ULL));
}

}  // namespace detail

template <typename T>
class BasicOctNet {
public:
    BasicOctNet() : BasicOctNet(NetConfig{}) {}

    explicit BasicOctNet(NetConfig cfg) : config_(cfg), layers_(octnet_layer_table(cfg)) {
        check_dropout_rate(cfg.conv_dropout);
        check_dropout_rate(cfg.dense_dropout);
        for (const auto& l : layers_) {
            if (l.kind == LayerKind::conv) {
                params_.emplace_back(l.conv.weight_shape());
                params_.emplace_back(Shape{l.conv.out_channels});
            } else if (l.kind == LayerKind::dense) {
                params_.emplace_back(Shape{l.dense_in, l.dense_out});
                params_.emplace_back(Shape{l.dense_out});
            }
        }
    }

    // Uniform in +-sqrt(6 / fan_in) for weights, zero biases.
    static BasicOctNet build(std::uint64_t seed, NetConfig cfg = {}) {
        BasicOctNet net(cfg);
        std::uint64_t counter = 0;
        for (const auto& l : net.layers_) {
            if (l.param_slot < 0) continue;
            auto& w = net.params_[static_cast<std::size_t>(l.param_slot)];
            const double fan_in = static_cast<double>(w.size() / w.shape().back());
            const double limit = std::sqrt(6.0 / fan_in);
            for (auto& v : w.data()) v = static_cast<T>((2.0 * counter_uniform(seed, counter++) - 1.0) * limit);
        }
        return net;
    }

    template <typename U>
    static BasicOctNet cast(const BasicOctNet<U>& other) {
        BasicOctNet net(other.config());
        for (std::size_t i = 0; i < net.params_.size(); ++i) net.params_[i] = BasicTensor<T>::cast(other.params()[i]);
        return net;
    }

    const NetConfig& config() const { return config_; }
    void set_config(const NetConfig& c) {
        check_dropout_rate(c.conv_dropout);
        check_dropout_rate(c.dense_dropout);
        config_ = c;
    }
    const std::vector<LayerInfo>& layers() const { return layers_; }
    std::vector<BasicTensor<T>>& params() { return params_; }
    const std::vector<BasicTensor<T>>& params() const { return params_; }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.size();
        return n;
    }

    double dropout_rate(std::size_t layer) const {
        return layer < kLastConvLayer + 4 ? config_.conv_dropout : config_.dense_dropout;
    }

    ParamGrads zero_grads() const {
        ParamGrads g;
        for (const auto& p : params_) g.emplace_back(p.shape());
        return g;
    }

    ForwardTrace<T> forward(const BasicTensor<T>& image, Mode mode = Mode::eval, std::uint64_t dropout_seed = 0) const {
        require_shape(image.shape(), layers_.front().in_shape, "octnet forward input");
        ForwardTrace<T> tr;
        tr.input = image;
        tr.outputs.reserve(layers_.size());
        tr.argmax.resize(layers_.size());
        tr.dropout_masks.resize(layers_.size());
        const BasicTensor<T>* x = &tr.input;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            tr.outputs.push_back(run_layer(i, *x, mode, dropout_seed, &tr.argmax[i], &tr.dropout_masks[i]));
            x = &tr.outputs.back();
        }
        tr.logits = tr.outputs.back();
        tr.probs = head(tr.logits);
        return tr;
    }

    // Eval-mode logits computed from the output of `layer` (e.g. a perturbed
    // last-conv activation).
    BasicTensor<T> tail_logits(std::size_t layer, const BasicTensor<T>& activation) const {
        require_shape(activation.shape(), layers_.at(layer).out_shape, "octnet tail activation");
        BasicTensor<T> x = activation;
        for (std::size_t i = layer + 1; i < layers_.size(); ++i) x = run_layer(i, x, Mode::eval, 0, nullptr, nullptr);
        return x;
    }

    BasicTensor<T> head(const BasicTensor<T>& logits) const {
        BasicTensor<T> p = logits;
        if (config_.head == OutputHead::sigmoid) {
            for (auto& v : p.data()) v = sigmoid(v);
        } else {
            double mx = logits[0];
            for (auto v : logits.data()) mx = std::max(mx, static_cast<double>(v));
            double sum = 0.0;
            for (auto v : logits.data()) sum += std::exp(static_cast<double>(v) - mx);
            for (std::size_t i = 0; i < p.size(); ++i)
                p[i] = static_cast<T>(std::exp(static_cast<double>(logits[i]) - mx) / sum);
        }
        return p;
    }

    // Backpropagates d(loss)/d(logits) through layers last..stop_layer+1 and
    // returns the gradient w.r.t. outputs[stop_layer]. stop_layer = -1 runs the
    // whole stack (the returned tensor is then empty; the image gradient is not
    // formed). Parameter gradients accumulate into `grads` when non-null.
    BasicTensor<T> backward(const ForwardTrace<T>& tr, const BasicTensor<T>& dlogits, ParamGrads* grads,
                            int stop_layer = -1) const {
        require_shape(dlogits.shape(), tr.logits.shape(), "octnet backward dlogits");
        BasicTensor<T> g = dlogits;
        BasicTensor<T> gin;
        for (int i = static_cast<int>(layers_.size()) - 1; i > stop_layer; --i) {
            const auto& l = layers_[static_cast<std::size_t>(i)];
            const BasicTensor<T>& in = i == 0 ? tr.input : tr.outputs[static_cast<std::size_t>(i - 1)];
            const BasicTensor<T>& out = tr.outputs[static_cast<std::size_t>(i)];
            switch (l.kind) {
                case LayerKind::conv:
                case LayerKind::dense: {
                    if (l.relu)
                        for (std::size_t k = 0; k < g.size(); ++k)
                            if (!(out[k] > T{})) g[k] = T{};
                    const bool need_input = i > 0;
                    const auto slot = static_cast<std::size_t>(l.param_slot);
                    ParamGrads scratch;
                    BasicTensor<double>* gw;
                    BasicTensor<double>* gb;
                    if (grads) {
                        gw = &(*grads)[slot];
                        gb = &(*grads)[slot + 1];
                    } else {
                        if (!need_input) break;
                        scratch.emplace_back(params_[slot].shape());
                        scratch.emplace_back(params_[slot + 1].shape());
                        gw = &scratch[0];
                        gb = &scratch[1];
                    }
                    if (l.kind == LayerKind::conv)
                        conv2d_grad_accumulate(in, params_[slot], l.conv, g, need_input ? &gin : nullptr, *gw, *gb);
                    else
                        dense_grad_accumulate(in, params_[slot], g, need_input ? &gin : nullptr, *gw, *gb);
                    if (need_input) std::swap(g, gin);
                    break;
                }
                case LayerKind::maxpool:
                    g = maxpool2d_grad(tr.argmax[static_cast<std::size_t>(i)], g, in.shape());
                    break;
                case LayerKind::dropout: {
                    const auto& m = tr.dropout_masks[static_cast<std::size_t>(i)];
                    if (!m.empty())
                        for (std::size_t k = 0; k < g.size(); ++k) g[k] *= m[k];
                    break;
                }
                case LayerKind::flatten:
                    g = g.reshaped(in.shape());
                    break;
            }
        }
        if (stop_layer < 0) return {};
        return g;
    }

    const BasicTensor<T>& weight(const LayerInfo& l) const { return params_[static_cast<std::size_t>(l.param_slot)]; }
    const BasicTensor<T>& bias(const LayerInfo& l) const { return params_[static_cast<std::size_t>(l.param_slot) + 1]; }

private:
    BasicTensor<T> run_layer(std::size_t i, const BasicTensor<T>& x, Mode mode, std::uint64_t dropout_seed,
                             std::vector<std::uint32_t>* argmax, std::vector<T>* mask) const {
        const auto& l = layers_[i];
        switch (l.kind) {
            case LayerKind::conv: {
                auto y = conv2d(x, weight(l), bias(l), l.conv);
                relu_inplace(y);
                return y;
            }
            case LayerKind::maxpool: {
                auto r = maxpool2d(x);
                if (argmax) *argmax = std::move(r.argmax);
                return std::move(r.output);
            }
            case LayerKind::dropout: {
                const double rate = dropout_rate(i);
                BasicTensor<T> y = x;
                if (mode == Mode::train && rate > 0.0) {
                    auto m = dropout_mask<T>(y.size(), rate, detail::mix_seed(dropout_seed, i));
                    for (std::size_t k = 0; k < y.size(); ++k) y[k] *= m[k];
                    if (mask) *mask = std::move(m);
                }
                return y;
            }
            case LayerKind::flatten:
                return x.reshaped(l.out_shape);
            case LayerKind::dense: {
                auto y = octx::dense(x, weight(l), bias(l));
                if (l.relu) relu_inplace(y);
                return y;
            }
        }
        throw DimensionError("unknown layer kind");
    }

    NetConfig config_;
    std::vector<LayerInfo> layers_;
    std::vector<BasicTensor<T>> params_;
};

using OctNet = BasicOctNet<float>;

// Lowest index wins ties.
template <typename Range>
std::size_t argmax_index(const Range& r) {
    std::size_t best = 0, i = 0;
    for (auto v : r) {
        if (v > r[best]) best = i;
        ++i;
    }
    return best;
}

struct Prediction {
    ClassLabel label;
    std::array<double, kNumClasses> probs;
};

template <typename T>
Prediction predict(const BasicOctNet<T>& net, const BasicTensor<T>& image) {
    const auto tr = net.forward(image, Mode::eval);
    Prediction p{};
    for (std::size_t i = 0; i < kNumClasses; ++i) p.probs[i] = static_cast<double>(tr.probs[i]);
    p.label = static_cast<ClassLabel>(argmax_index(p.probs));
    return p;
}

struct LossResult {
    double loss = 0.0;
    ParamGrads grads;
    std::size_t correct = 0;
    std::size_t count = 0;
};

inline constexpr double kProbClamp = 1e-7;

// Loss of one sample and d(loss)/d(logits), both unnormalized by batch size.
template <typename T>
double sample_loss(const BasicTensor<T>& logits, std::size_t label, LossKind kind,
                   std::type_identity_t<BasicTensor<T>>* dlogits) {
    const std::size_t C = logits.size();
    if (label >= C) throw DimensionError("label index " + std::to_string(label) + " outside class range");
    if (dlogits) *dlogits = BasicTensor<T>(logits.shape());
    double loss = 0.0;
    if (kind == LossKind::bce_sigmoid) {
        for (std::size_t c = 0; c < C; ++c) {
            const double p = sigmoid(static_cast<double>(logits[c]));
            const double y = c == label ? 1.0 : 0.0;
            const double pc = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
            loss -= y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
            if (dlogits) (*dlogits)[c] = static_cast<T>((p - y) / static_cast<double>(C));
        }
        loss /= static_cast<double>(C);
    } else {
        double mx = logits[0];
        for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, static_cast<double>(logits[c]));
        double sum = 0.0;
        for (std::size_t c = 0; c < C; ++c) sum += std::exp(static_cast<double>(logits[c]) - mx);
        for (std::size_t c = 0; c < C; ++c) {
            const double p = std::exp(static_cast<double>(logits[c]) - mx) / sum;
            if (c == label) loss = -std::log(std::max(p, kProbClamp));
            if (dlogits) (*dlogits)[c] = static_cast<T>(p - (c == label ? 1.0 : 0.0));
        }
    }
    return loss;
}

namespace detail {

template <typename T>
std::vector<std::size_t> one_hot_labels(const BasicTensor<T>& images, const BasicTensor<T>& one_hot) {
    require_rank(images.shape(), 4, "batch images");
    const std::size_t B = images.dim(0);
    require_shape(one_hot.shape(), {B, kNumClasses}, "batch labels");
    std::vector<std::size_t> labels(B);
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t hot = kNumClasses, ones = 0;
        for (std::size_t c = 0; c < kNumClasses; ++c) {
            const T v = one_hot[b * kNumClasses + c];
            if (v == T{1}) {
                hot = c;
                ++ones;
            } else if (v != T{}) {
                ones = 2;
            }
        }
        if (ones != 1) throw DimensionError("label row " + std::to_string(b) + " is not one-hot");
        labels[b] = hot;
    }
    return labels;
}

template <typename T>
BasicTensor<T> batch_item(const BasicTensor<T>& images, std::size_t b) {
    const Shape s{images.dim(1), images.dim(2), images.dim(3)};
    const std::size_t n = shape_size(s);
    return BasicTensor<T>(s, std::vector<T>(images.raw() + b * n, images.raw() + (b + 1) * n));
}

}  // namespace detail

// Forward-only counterpart of loss_and_grad (same dropout seeding).
template <typename T>
double batch_loss(const BasicOctNet<T>& net, const BasicTensor<T>& images, const BasicTensor<T>& one_hot,
                  LossKind kind = LossKind::bce_sigmoid, Mode mode = Mode::train, std::uint64_t dropout_seed = 0) {
    const auto labels = detail::one_hot_labels(images, one_hot);
    double loss = 0.0;
    for (std::size_t b = 0; b < labels.size(); ++b) {
        const auto tr = net.forward(detail::batch_item(images, b), mode, detail::mix_seed(dropout_seed, b));
        loss += sample_loss<T>(tr.logits, labels[b], kind, nullptr);
    }
    return loss / static_cast<double>(labels.size());
}

// Mean loss over the batch (and over classes for BCE) with parameter gradients.
// images is B x 224 x 224 x 3 and one_hot is B x 4. Samples are split into
// `threads` contiguous chunks whose gradient sums are added in chunk order, so
// results are reproducible for a fixed thread count.
template <typename T>
LossResult loss_and_grad(const BasicOctNet<T>& net, const BasicTensor<T>& images, const BasicTensor<T>& one_hot,
                         LossKind kind = LossKind::bce_sigmoid, Mode mode = Mode::train, std::uint64_t dropout_seed = 0,
                         unsigned threads = 1) {
    const auto labels = detail::one_hot_labels(images, one_hot);
    const std::size_t B = labels.size();

    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(B)));
    struct Partial {
        double loss = 0.0;
        std::size_t correct = 0;
        ParamGrads grads;
    };
    std::vector<Partial> parts(threads);
    const double scale = 1.0 / static_cast<double>(B);

    auto work = [&](unsigned t) {
        auto& part = parts[t];
        part.grads = net.zero_grads();
        const std::size_t lo = B * t / threads, hi = B * (t + 1) / threads;
        BasicTensor<T> dlogits;
        for (std::size_t b = lo; b < hi; ++b) {
            const auto tr = net.forward(detail::batch_item(images, b), mode, detail::mix_seed(dropout_seed, b));
            part.loss += sample_loss(tr.logits, labels[b], kind, &dlogits);
            if (argmax_index(tr.logits.data()) == labels[b]) ++part.correct;
            for (auto& v : dlogits.data()) v = static_cast<T>(static_cast<double>(v) * scale);
            net.backward(tr, dlogits, &part.grads);
        }
    };
    if (threads == 1) {
        work(0);
    } else {
        std::vector<std::jthread> pool;
        for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work, t);
    }

    LossResult r;
    r.count = B;
    r.grads = std::move(parts[0].grads);
    r.loss = parts[0].loss;
    r.correct = parts[0].correct;
    for (unsigned t = 1; t < threads; ++t) {
        r.loss += parts[t].loss;
        r.correct += parts[t].correct;
        for (std::size_t k = 0; k < r.grads.size(); ++k)
            for (std::size_t j = 0; j < r.grads[k].size(); ++j) r.grads[k][j] += parts[t].grads[k][j];
    }
    r.loss *= scale;
    return r;
}

}  // namespace octx
