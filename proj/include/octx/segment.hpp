#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "octx/tensor.hpp"

namespace octx {

// Per-pixel segment ids, row-major, contiguous from 0.
struct SegmentMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t count = 0;
    std::vector<std::uint32_t> labels;

    std::uint32_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }

    std::vector<std::size_t> sizes() const {
        std::vector<std::size_t> s(count, 0);
        for (auto l : labels) ++s[l];
        return s;
    }
};

enum class SegmentMode { grid, slic };

struct SlicOptions {
    std::size_t iterations = 10;
    // Intensity distance scale; smaller values favour colour over position.
    double compactness = 0.1;
};

struct GridLayout {
    std::size_t rows, cols;
};

// cols = ceil(sqrt(S)), rows = ceil(S / cols).
inline GridLayout grid_layout(std::size_t s_target) {
    if (s_target < 2) throw ParameterError("segment count must be >= 2, got " + std::to_string(s_target));
    auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(s_target))));
    while (cols * cols < s_target) ++cols;
    while (cols > 1 && (cols - 1) * (cols - 1) >= s_target) --cols;
    return {(s_target + cols - 1) / cols, cols};
}

inline SegmentMap segment_grid(std::size_t height, std::size_t width, std::size_t s_target) {
    const auto g = grid_layout(s_target);
    if (g.rows > height || g.cols > width) throw ParameterError("segment grid finer than the image");
    SegmentMap m{height, width, g.rows * g.cols, std::vector<std::uint32_t>(height * width)};
    for (std::size_t y = 0; y < height; ++y) {
        const std::size_t r = y * g.rows / height;
        for (std::size_t x = 0; x < width; ++x)
            m.labels[y * width + x] = static_cast<std::uint32_t>(r * g.cols + x * g.cols / width);
    }
    return m;
}

namespace detail {

inline void relabel_contiguous(SegmentMap& m, std::size_t max_label) {
    std::vector<std::uint32_t> remap(max_label, std::numeric_limits<std::uint32_t>::max());
    std::uint32_t next = 0;
    for (auto& l : m.labels) {
        if (remap[l] == std::numeric_limits<std::uint32_t>::max()) remap[l] = next++;
        l = remap[l];
    }
    m.count = next;
}

}  // namespace detail

// k-means on (x, y, intensity) seeded at the centres of the grid_layout cells.
// Every pixel is compared against every centre, so the result is exact and
// deterministic. Ids are renumbered in raster order of first appearance.
inline SegmentMap segment_slic(const Tensor& image, std::size_t s_target, const SlicOptions& opt = {}) {
    require_rank(image.shape(), 3, "segment_slic image");
    if (!(opt.compactness > 0.0)) throw ParameterError("slic compactness must be > 0");
    const std::size_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
    const auto g = grid_layout(s_target);
    const std::size_t K = g.rows * g.cols;
    if (g.rows > H || g.cols > W) throw ParameterError("segment count exceeds image size");

    std::vector<double> intensity(H * W);
    for (std::size_t i = 0; i < H * W; ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c) s += image[i * C + c];
        intensity[i] = s / static_cast<double>(C);
    }
    struct Centre {
        double y, x, v;
    };
    std::vector<Centre> centres(K);
    for (std::size_t r = 0; r < g.rows; ++r)
        for (std::size_t c = 0; c < g.cols; ++c) {
            const double cy = (static_cast<double>(r) + 0.5) * static_cast<double>(H) / static_cast<double>(g.rows);
            const double cx = (static_cast<double>(c) + 0.5) * static_cast<double>(W) / static_cast<double>(g.cols);
            const auto py = std::min(H - 1, static_cast<std::size_t>(cy));
            const auto px = std::min(W - 1, static_cast<std::size_t>(cx));
            centres[r * g.cols + c] = {cy, cx, intensity[py * W + px]};
        }
    const double step = std::sqrt(static_cast<double>(H * W) / static_cast<double>(K));
    const double ws = 1.0 / (step * step), wv = 1.0 / (opt.compactness * opt.compactness);

    SegmentMap m{H, W, K, std::vector<std::uint32_t>(H * W, 0)};
    for (std::size_t it = 0; it < std::max<std::size_t>(opt.iterations, 1); ++it) {
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const double v = intensity[y * W + x];
                double best = std::numeric_limits<double>::infinity();
                std::uint32_t arg = 0;
                for (std::size_t k = 0; k < K; ++k) {
                    const double dy = static_cast<double>(y) + 0.5 - centres[k].y;
                    const double dx = static_cast<double>(x) + 0.5 - centres[k].x;
                    const double dv = v - centres[k].v;
                    const double d = (dy * dy + dx * dx) * ws + dv * dv * wv;
                    if (d < best) {
                        best = d;
                        arg = static_cast<std::uint32_t>(k);
                    }
                }
                m.labels[y * W + x] = arg;
            }
        std::vector<double> sy(K, 0.0), sx(K, 0.0), sv(K, 0.0);
        std::vector<std::size_t> n(K, 0);
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const auto k = m.labels[y * W + x];
                sy[k] += static_cast<double>(y) + 0.5;
                sx[k] += static_cast<double>(x) + 0.5;
                sv[k] += intensity[y * W + x];
                ++n[k];
            }
        for (std::size_t k = 0; k < K; ++k)
            if (n[k]) centres[k] = {sy[k] / n[k], sx[k] / n[k], sv[k] / n[k]};
    }
    detail::relabel_contiguous(m, K);
    return m;
}

inline SegmentMap segment_image(const Tensor& image, SegmentMode mode, std::size_t s_target,
                                const SlicOptions& opt = {}) {
    require_rank(image.shape(), 3, "segment_image");
    if (mode == SegmentMode::grid) {
        grid_layout(s_target);  // validates s_target
        return segment_grid(image.dim(0), image.dim(1), s_target);
    }
    return segment_slic(image, s_target, opt);
}

inline const char* segment_mode_name(SegmentMode m) { return m == SegmentMode::grid ? "grid" : "slic"; }

}  // namespace octx
