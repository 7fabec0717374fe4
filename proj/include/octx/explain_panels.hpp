#pragma once

// Renders the explanation panel set shared by the CLI and the HTTP service, so
// both paths produce identical bytes for identical inputs:
//   A original, B segment map, C positive-only (k), D positive/negative (k wide),
//   E Grad-CAM heatmap.

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "octx/gradcam.hpp"
#include "octx/image_io.hpp"
#include "octx/lime.hpp"
#include "octx/render.hpp"

namespace octx {

inline constexpr double kHeatmapAlpha = 0.4;
inline constexpr std::size_t kDefaultFeaturesWide = 10;

struct Panel {
    std::string key;   // HTTP overlay key
    std::string file;  // CLI output file name
    std::vector<std::uint8_t> png;
};

struct ExplainArtifacts {
    std::vector<Panel> panels;
    nlohmann::json data;
    std::string gradcam_raw;  // 12x12 grid as text, Grad-CAM only
};

inline std::vector<std::uint32_t> segment_ids(const std::vector<SelectedSegment>& s) {
    std::vector<std::uint32_t> ids;
    for (const auto& x : s) ids.push_back(x.id);
    return ids;
}

// LIME panels for the most probable class.
inline ExplainArtifacts lime_panels(const OctNet& net, const Tensor& image, const LimeParams& params,
                                    std::size_t features_wide = kDefaultFeaturesWide) {
    const auto res = explain(net, image, params);
    const auto& top = res.explanations.front();
    const auto positive = select_positive(top.weights, params.num_features);
    const auto wide = top.top(features_wide);
    ExplainArtifacts a;
    a.panels.push_back({"original", "A_original.png", encode_png(to_image8(image))});
    a.panels.push_back({"segments", "B_segments.png",
                        encode_png(render_overlay(image, res.segments, std::vector<SelectedSegment>{},
                                                  OverlayMode::boundaries))});
    a.panels.push_back({"positive", "C_positive_k" + std::to_string(params.num_features) + ".png",
                        encode_png(render_overlay(image, res.segments, positive, OverlayMode::positive_only))});
    a.panels.push_back({"pos_neg", "D_posneg_k" + std::to_string(features_wide) + ".png",
                        encode_png(render_overlay(image, res.segments, wide, OverlayMode::pos_neg))});
    a.data = lime_result_json(res);
    a.data["overlay_class"] = class_name(static_cast<ClassLabel>(top.target));
    a.data["positive_segments"] = segment_ids(positive);
    a.data["pos_neg_segments"] = segment_ids(wide);
    a.data["features_wide"] = features_wide;
    return a;
}

// Grad-CAM panel for `cls`, or the predicted class when absent.
inline ExplainArtifacts gradcam_panels(const OctNet& net, const Tensor& image, std::optional<std::size_t> cls = {},
                                       double alpha = kHeatmapAlpha) {
    const std::size_t target = cls ? *cls : index_of(predict(net, image).label);
    const auto h = gradcam(net, image, target);
    ExplainArtifacts a;
    a.panels.push_back({"gradcam", "E_gradcam.png", encode_png(render_heatmap(image, h.upsampled, alpha))});
    a.data = heatmap_json(h);
    a.data["alpha"] = alpha;
    a.gradcam_raw = raw_grid_text(h.raw);
    return a;
}

}  // namespace octx
