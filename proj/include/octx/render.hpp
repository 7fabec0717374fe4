#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "octx/image_io.hpp"
#include "octx/jet_lut.hpp"
#include "octx/lime.hpp"
#include "octx/segment.hpp"

namespace octx {

enum class OverlayMode { positive_only, pos_neg, boundaries };

inline constexpr double kOverlayAlpha = 0.4;
inline constexpr std::array<double, 3> kPositiveTint{0.0, 1.0, 0.0};
inline constexpr std::array<double, 3> kNegativeTint{1.0, 0.0, 0.0};
inline constexpr std::array<double, 3> kBoundaryColour{1.0, 1.0, 0.0};

namespace detail {

inline void check_render_input(const Tensor& image) {
    require_rank(image.shape(), 3, "render image");
    if (image.dim(2) != 3) throw DimensionError("render expects a 3-channel image");
}

}  // namespace detail

// positive_only: selected segments with weight > 0 blended toward green.
// pos_neg: additionally, selected segments with weight < 0 toward red.
// boundaries: one-pixel outlines of every segment. Other pixels are copied.
inline Image8 render_overlay(const Tensor& image, const SegmentMap& seg, const std::vector<SelectedSegment>& selected,
                             OverlayMode mode, double alpha = kOverlayAlpha) {
    detail::check_render_input(image);
    require_segmap(image, seg);
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("overlay alpha must lie in [0, 1]");
    const std::size_t H = seg.height, W = seg.width;
    // 0 untouched, 1 positive, 2 negative
    std::vector<std::uint8_t> tint(seg.count, 0);
    for (const auto& s : selected) {
        if (s.id >= seg.count) throw DimensionError("selected segment " + std::to_string(s.id) + " not in map");
        if (s.weight > 0.0) tint[s.id] = 1;
        else if (s.weight < 0.0 && mode == OverlayMode::pos_neg) tint[s.id] = 2;
    }
    Tensor out = image;
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const std::size_t p = y * W + x;
            const auto l = seg.labels[p];
            const std::array<double, 3>* colour = nullptr;
            double a = alpha;
            if (mode == OverlayMode::boundaries) {
                const bool edge = (x + 1 < W && seg.labels[p + 1] != l) || (y + 1 < H && seg.labels[p + W] != l) ||
                                  (x > 0 && seg.labels[p - 1] != l) || (y > 0 && seg.labels[p - W] != l);
                if (edge) {
                    colour = &kBoundaryColour;
                    a = 1.0;
                }
            } else if (tint[l] == 1) {
                colour = &kPositiveTint;
            } else if (tint[l] == 2) {
                colour = &kNegativeTint;
            }
            if (!colour) continue;
            for (std::size_t c = 0; c < 3; ++c)
                out[p * 3 + c] = static_cast<float>((1.0 - a) * image[p * 3 + c] + a * (*colour)[c]);
        }
    return to_image8(out);
}

inline Image8 render_overlay(const Tensor& image, const SegmentMap& seg, const Explanation& e, OverlayMode mode,
                             double alpha = kOverlayAlpha) {
    return render_overlay(image, seg, e.selected, mode, alpha);
}

// Ramp colour for h in [0, 1] from the 256-entry table.
inline std::array<double, 3> jet(double h) {
    const double c = std::clamp(std::isfinite(h) ? h : 0.0, 0.0, 1.0);
    const auto& e = kJetLut[static_cast<std::size_t>(std::lround(c * 255.0))];
    return {e[0] / 255.0, e[1] / 255.0, e[2] / 255.0};
}

// out = (1 - alpha) * src + alpha * jet(h), per pixel. heat is H x W (x 1).
inline Image8 render_heatmap(const Tensor& image, const TensorD& heat, double alpha) {
    detail::check_render_input(image);
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("heatmap alpha must lie in [0, 1]");
    const std::size_t H = image.dim(0), W = image.dim(1);
    if (heat.size() != H * W || heat.dim(0) != H || heat.dim(1) != W)
        throw DimensionError("heatmap " + shape_str(heat.shape()) + " does not match image " +
                             shape_str(image.shape()));
    Tensor out = image;
    for (std::size_t p = 0; p < H * W; ++p) {
        const auto rgb = jet(heat[p]);
        for (std::size_t c = 0; c < 3; ++c)
            out[p * 3 + c] = static_cast<float>((1.0 - alpha) * image[p * 3 + c] + alpha * rgb[c]);
    }
    return to_image8(out);
}

}  // namespace octx
