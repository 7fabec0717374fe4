#pragma once

#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "octx/classes.hpp"
#include "octx/image_io.hpp"
#include "octx/octnet.hpp"

namespace octx {

struct Heatmap {
    std::size_t target = 0;
    double score = 0.0;          // pre-sigmoid logit of the target class
    std::vector<double> alphas;  // per-channel weights
    TensorD raw;                 // h x w, non-negative
    TensorD upsampled;           // 224 x 224, max-normalized unless empty
    bool empty = false;          // raw identically zero
};

struct CamCore {
    std::vector<double> alphas;
    TensorD raw;
};

// alpha_k = mean over (y, x) of dA[y, x, k]; raw = ReLU(sum_k alpha_k A[:, :, k]).
template <typename T>
CamCore gradcam_core(const BasicTensor<T>& A, const BasicTensor<T>& dA) {
    require_rank(A.shape(), 3, "gradcam activations");
    require_shape(dA.shape(), A.shape(), "gradcam activation gradient");
    const std::size_t H = A.dim(0), W = A.dim(1), K = A.dim(2);
    CamCore r;
    r.alphas.assign(K, 0.0);
    for (std::size_t p = 0; p < H * W; ++p)
        for (std::size_t k = 0; k < K; ++k) r.alphas[k] += static_cast<double>(dA[p * K + k]);
    for (auto& a : r.alphas) a /= static_cast<double>(H * W);
    r.raw = TensorD({H, W});
    for (std::size_t p = 0; p < H * W; ++p) {
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) s += r.alphas[k] * static_cast<double>(A[p * K + k]);
        r.raw[p] = s > 0.0 ? s : 0.0;
    }
    return r;
}

// Bilinear upsampling to size x size followed by max-normalization.
inline TensorD upsample_heat(const TensorD& raw, std::size_t size, bool& empty) {
    require_rank(raw.shape(), 2, "heat grid");
    double mx = 0.0;
    for (double v : raw.data()) mx = std::max(mx, v);
    empty = !(mx > 0.0);
    TensorD up = resize_bilinear(raw.reshaped({raw.dim(0), raw.dim(1), 1}), size, size).reshaped({size, size});
    if (empty) return up;
    double umx = 0.0;
    for (double v : up.data()) umx = std::max(umx, v);
    for (auto& v : up.data()) v /= umx;
    return up;
}

// Heatmap for the target class, backpropagating `score_scale` * logit to the
// last conv activation (post-ReLU, 12 x 12 x 128). Eval mode, deterministic.
template <typename T>
Heatmap gradcam(const BasicOctNet<T>& net, const BasicTensor<T>& image, std::size_t class_index,
                double score_scale = 1.0) {
    if (class_index >= kNumClasses) throw ParameterError("gradcam class index " + std::to_string(class_index) +
                                                         " outside 0.." + std::to_string(kNumClasses - 1));
    const auto tr = net.forward(image, Mode::eval);
    BasicTensor<T> seed(tr.logits.shape());
    seed[class_index] = static_cast<T>(score_scale);
    const auto dA = net.backward(tr, seed, nullptr, static_cast<int>(kLastConvLayer));
    auto core = gradcam_core(tr.last_conv_activation(), dA);
    Heatmap h;
    h.target = class_index;
    h.score = static_cast<double>(tr.logits[class_index]);
    h.alphas = std::move(core.alphas);
    h.raw = std::move(core.raw);
    h.upsampled = upsample_heat(h.raw, image.dim(0), h.empty);
    return h;
}

// One row per line, space-separated, round-trippable.
inline std::string raw_grid_text(const TensorD& raw) {
    std::ostringstream os;
    char buf[40];
    for (std::size_t y = 0; y < raw.dim(0); ++y) {
        for (std::size_t x = 0; x < raw.dim(1); ++x) {
            std::snprintf(buf, sizeof buf, "%.17g", raw[y * raw.dim(1) + x]);
            os << (x ? " " : "") << buf;
        }
        os << '\n';
    }
    return os.str();
}

inline nlohmann::json heatmap_json(const Heatmap& h) {
    return {{"method", "gradcam"},
            {"class", class_name(static_cast<ClassLabel>(h.target))},
            {"class_index", h.target},
            {"score", h.score},
            {"empty", h.empty},
            {"grid", {h.raw.dim(0), h.raw.dim(1)}}};
}

}  // namespace octx
