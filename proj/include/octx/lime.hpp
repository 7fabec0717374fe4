#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "octx/classes.hpp"
#include "octx/layers.hpp"
#include "octx/log.hpp"
#include "octx/octnet.hpp"
#include "octx/segment.hpp"

namespace octx {

enum class Baseline { segment_mean, gray };
enum class MaskSampling { random, enumerate };

struct LimeParams {
    std::size_t num_samples = 100;
    std::size_t top_labels = 5;  // saturates at the class count
    std::size_t num_features = 5;
    std::uint64_t seed = 0;
    double kernel_width = 0.25;
    double ridge_lambda = 1.0;
    Baseline baseline = Baseline::segment_mean;
    SegmentMode segmentation = SegmentMode::grid;
    std::size_t segments = 64;
    SlicOptions slic{};
    unsigned threads = 1;

    void validate() const {
        if (num_samples < 1) throw ParameterError("num_samples must be >= 1");
        if (top_labels < 1) throw ParameterError("top_labels must be >= 1");
        if (num_features < 1) throw ParameterError("num_features must be >= 1");
        if (!(kernel_width > 0.0)) throw ParameterError("kernel_width must be > 0");
        if (!(ridge_lambda >= 0.0)) throw ParameterError("ridge_lambda must be >= 0");
        grid_layout(segments);
    }
};

using Mask = std::vector<std::uint8_t>;

// mask[0] is all ones. random: remaining bits are fair coin flips from a
// counter-based stream keyed by seed. enumerate: mask i has the bits of
// 2^S - 1 - i, so the first 2^S masks are all distinct (a test hook).
inline std::vector<Mask> sample_masks(std::size_t S, std::size_t n, std::uint64_t seed,
                                      MaskSampling mode = MaskSampling::random) {
    if (S < 1) throw ParameterError("sample_masks: S must be >= 1");
    if (n < 1) throw ParameterError("sample_masks: n must be >= 1");
    std::vector<Mask> masks(n, Mask(S, 1));
    if (mode == MaskSampling::enumerate) {
        if (S >= 63 || n > (std::uint64_t{1} << S))
            throw ParameterError("enumeration needs n <= 2^S with small S");
        const std::uint64_t full = (std::uint64_t{1} << S) - 1;
        for (std::size_t i = 1; i < n; ++i)
            for (std::size_t j = 0; j < S; ++j) masks[i][j] = ((full - i) >> j) & 1u;
        return masks;
    }
    for (std::size_t i = 1; i < n; ++i)
        for (std::size_t j = 0; j < S; ++j)
            masks[i][j] = counter_uniform(seed, static_cast<std::uint64_t>(i) * S + j) < 0.5 ? 1 : 0;
    return masks;
}

inline void require_segmap(const Tensor& image, const SegmentMap& seg) {
    require_rank(image.shape(), 3, "lime image");
    if (image.dim(0) != seg.height || image.dim(1) != seg.width)
        throw DimensionError("segment map " + std::to_string(seg.height) + "x" + std::to_string(seg.width) +
                             " does not match image " + shape_str(image.shape()));
}

// Per-segment mean colour, segment-major (S x channels).
inline std::vector<double> segment_means(const Tensor& image, const SegmentMap& seg) {
    require_segmap(image, seg);
    const std::size_t C = image.dim(2);
    std::vector<double> sum(seg.count * C, 0.0);
    std::vector<std::size_t> n(seg.count, 0);
    for (std::size_t p = 0; p < seg.labels.size(); ++p) {
        const auto l = seg.labels[p];
        ++n[l];
        for (std::size_t c = 0; c < C; ++c) sum[l * C + c] += image[p * C + c];
    }
    for (std::size_t l = 0; l < seg.count; ++l)
        for (std::size_t c = 0; c < C; ++c)
            if (n[l]) sum[l * C + c] /= static_cast<double>(n[l]);
    return sum;
}

inline Tensor apply_mask(const Tensor& image, const SegmentMap& seg, const Mask& mask, Baseline baseline,
                         const std::vector<double>& means) {
    require_segmap(image, seg);
    if (mask.size() != seg.count)
        throw DimensionError("mask length " + std::to_string(mask.size()) + " != segment count " +
                             std::to_string(seg.count));
    const std::size_t C = image.dim(2);
    Tensor out = image;
    for (std::size_t p = 0; p < seg.labels.size(); ++p) {
        const auto l = seg.labels[p];
        if (mask[l]) continue;
        for (std::size_t c = 0; c < C; ++c)
            out[p * C + c] = baseline == Baseline::gray ? 0.5f : static_cast<float>(means[l * C + c]);
    }
    return out;
}

inline Tensor apply_mask(const Tensor& image, const SegmentMap& seg, const Mask& mask, Baseline baseline) {
    return apply_mask(image, seg, mask, baseline,
                      baseline == Baseline::segment_mean ? segment_means(image, seg) : std::vector<double>{});
}

// Cosine distance to the all-ones vector: 1 - |m|_1 / (sqrt(|m|_1) sqrt(S)).
// Undefined (nullopt) for the zero mask.
inline std::optional<double> mask_distance(const Mask& m) {
    const auto on = static_cast<double>(std::count(m.begin(), m.end(), std::uint8_t{1}));
    if (on == 0.0) return std::nullopt;
    return 1.0 - std::sqrt(on / static_cast<double>(m.size()));
}

inline std::optional<double> kernel_weight(const Mask& m, double kernel_width) {
    const auto d = mask_distance(m);
    if (!d) return std::nullopt;
    return std::exp(-(*d) * (*d) / (kernel_width * kernel_width));
}

struct KernelWeights {
    std::vector<double> weights;
    std::vector<std::size_t> zero_masks;  // indices assigned the fallback weight
};

inline KernelWeights kernel_weights(const std::vector<Mask>& masks, double kernel_width) {
    KernelWeights kw;
    kw.weights.resize(masks.size(), 0.0);
    double min_pos = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < masks.size(); ++i) {
        if (const auto w = kernel_weight(masks[i], kernel_width)) {
            kw.weights[i] = *w;
            if (*w > 0.0) min_pos = std::min(min_pos, *w);
        } else {
            kw.zero_masks.push_back(i);
        }
    }
    if (!std::isfinite(min_pos)) min_pos = 1.0;
    for (auto i : kw.zero_masks) kw.weights[i] = min_pos;
    return kw;
}

struct Surrogate {
    std::vector<double> beta;
    double intercept = 0.0;
};

namespace detail {

// In-place Cholesky of a dense SPD matrix (lower triangle); false if not SPD.
inline bool cholesky(std::vector<double>& a, std::size_t n) {
    double scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, std::abs(a[i * n + i]));
    const double tol = 1e-12 * std::max(scale, 1.0);
    for (std::size_t j = 0; j < n; ++j) {
        double d = a[j * n + j];
        for (std::size_t k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
        if (!(d > tol)) return false;
        d = std::sqrt(d);
        a[j * n + j] = d;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a[i * n + j];
            for (std::size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
            a[i * n + j] = s / d;
        }
    }
    return true;
}

inline std::vector<double> cholesky_solve(const std::vector<double>& l, std::size_t n, std::vector<double> b) {
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < i; ++k) b[i] -= l[i * n + k] * b[k];
        b[i] /= l[i * n + i];
    }
    for (std::size_t i = n; i-- > 0;) {
        for (std::size_t k = i + 1; k < n; ++k) b[i] -= l[k * n + i] * b[k];
        b[i] /= l[i * n + i];
    }
    return b;
}

// Weighted mean computed as an offset from the first value, so a constant
// sequence yields exactly that constant.
inline double shifted_weighted_mean(const std::vector<double>& v, const std::vector<double>& w, double wsum) {
    double acc = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) acc += w[i] * (v[i] - v[0]);
    return v[0] + acc / wsum;
}

inline void check_fit_inputs(const std::vector<Mask>& masks, const std::vector<double>& y,
                             const std::vector<double>& w) {
    if (masks.empty()) throw ParameterError("surrogate fit needs at least one sample");
    if (y.size() != masks.size() || w.size() != masks.size())
        throw DimensionError("surrogate fit: masks, targets and weights differ in length");
    const std::size_t S = masks[0].size();
    for (const auto& m : masks)
        if (m.size() != S) throw DimensionError("surrogate fit: ragged masks");
    for (double v : w)
        if (!(v >= 0.0) || !std::isfinite(v)) throw ParameterError("surrogate fit: weights must be finite and >= 0");
    for (double v : y)
        if (!std::isfinite(v)) throw NumericError("surrogate fit: non-finite target");
}

}  // namespace detail

// Minimizes sum_i w_i (y_i - b0 - b.m_i)^2 + lambda |b|^2 with b0 unpenalized.
// Eliminating b0 leaves the weighted-centred system (X'WX + lambda I) b = X'W(y - ybar),
// solved by Cholesky.
inline Surrogate fit_surrogate(const std::vector<Mask>& masks, const std::vector<double>& y,
                               const std::vector<double>& w, double lambda) {
    detail::check_fit_inputs(masks, y, w);
    if (!(lambda >= 0.0)) throw ParameterError("ridge lambda must be >= 0");
    const std::size_t n = masks.size(), S = masks[0].size();
    const double wsum = std::accumulate(w.begin(), w.end(), 0.0);
    if (!(wsum > 0.0)) throw NumericError("surrogate fit: all sample weights are zero");

    std::vector<double> mbar(S, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < S; ++j) mbar[j] += w[i] * masks[i][j];
    for (auto& v : mbar) v /= wsum;
    const double ybar = detail::shifted_weighted_mean(y, w, wsum);

    std::vector<double> A(S * S, 0.0), b(S, 0.0), x(S);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < S; ++j) x[j] = masks[i][j] - mbar[j];
        const double r = y[i] - ybar;
        for (std::size_t j = 0; j < S; ++j) {
            const double wx = w[i] * x[j];
            b[j] += wx * r;
            for (std::size_t k = 0; k <= j; ++k) A[j * S + k] += wx * x[k];
        }
    }
    for (std::size_t j = 0; j < S; ++j) {
        A[j * S + j] += lambda;
        for (std::size_t k = 0; k < j; ++k) A[k * S + j] = A[j * S + k];
    }
    if (!detail::cholesky(A, S))
        throw NumericError("surrogate system is singular (rank-deficient masks); use ridge_lambda > 0");
    Surrogate s;
    s.beta = detail::cholesky_solve(A, S, std::move(b));
    s.intercept = ybar;
    for (std::size_t j = 0; j < S; ++j) s.intercept -= mbar[j] * s.beta[j];
    return s;
}

inline double surrogate_predict(const Surrogate& s, const Mask& m) {
    double v = s.intercept;
    for (std::size_t j = 0; j < m.size(); ++j)
        if (m[j]) v += s.beta[j];
    return v;
}

// Weighted R^2; nullopt when the targets have zero weighted variance.
inline std::optional<double> weighted_r2(const std::vector<Mask>& masks, const std::vector<double>& y,
                                         const std::vector<double>& w, const Surrogate& s) {
    detail::check_fit_inputs(masks, y, w);
    const double wsum = std::accumulate(w.begin(), w.end(), 0.0);
    if (!(wsum > 0.0)) return std::nullopt;
    const double ybar = detail::shifted_weighted_mean(y, w, wsum);
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < masks.size(); ++i) {
        const double e = y[i] - surrogate_predict(s, masks[i]);
        ss_res += w[i] * e * e;
        ss_tot += w[i] * (y[i] - ybar) * (y[i] - ybar);
    }
    if (ss_tot == 0.0) return std::nullopt;
    return 1.0 - ss_res / ss_tot;
}

struct SelectedSegment {
    std::uint32_t id;
    double weight;
};

// Segment ids ordered by |weight| descending (lower id first on ties), first k.
inline std::vector<SelectedSegment> select_top(const std::vector<double>& weights, std::size_t k) {
    std::vector<std::uint32_t> ids(weights.size());
    std::iota(ids.begin(), ids.end(), 0u);
    std::stable_sort(ids.begin(), ids.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return std::abs(weights[a]) > std::abs(weights[b]); });
    ids.resize(std::min(k, ids.size()));
    std::vector<SelectedSegment> out;
    for (auto id : ids) out.push_back({id, weights[id]});
    return out;
}

// The first k positive-weight entries of the same ordering (what a
// positive-only overlay highlights).
inline std::vector<SelectedSegment> select_positive(const std::vector<double>& weights, std::size_t k) {
    std::vector<SelectedSegment> out;
    for (const auto& s : select_top(weights, weights.size())) {
        if (out.size() == k) break;
        if (s.weight > 0.0) out.push_back(s);
    }
    return out;
}

struct Explanation {
    std::size_t target = 0;
    double target_probability = 0.0;
    std::vector<double> weights;
    double intercept = 0.0;
    std::vector<SelectedSegment> selected;
    std::optional<double> fidelity;  // weighted R^2
    double local_prediction = 0.0;   // surrogate on the all-ones mask
    std::size_t zero_mask_samples = 0;

    std::vector<SelectedSegment> top(std::size_t k) const { return select_top(weights, k); }
};

struct LimeResult {
    SegmentMap segments;
    std::array<double, kNumClasses> probs{};
    std::vector<Explanation> explanations;  // by descending probability
    LimeParams params;
};

using ProbVector = std::array<double, kNumClasses>;
// Maps a batch of preprocessed images to class probabilities.
using BatchClassifier = std::function<std::vector<ProbVector>(const std::vector<Tensor>&)>;

namespace detail {

template <typename F>
auto lime_stage(const char* stage, F&& f) -> decltype(f()) {
    const std::string tag = std::string("lime ") + stage + ": ";
    try {
        return f();
    } catch (const NumericError& e) {
        throw NumericError(tag + e.what());
    } catch (const ParameterError& e) {
        throw ParameterError(tag + e.what());
    } catch (const DimensionError& e) {
        throw DimensionError(tag + e.what());
    }
}

// Class indices by descending probability, lower index first on ties.
inline std::vector<std::size_t> ranked_classes(const ProbVector& p) {
    std::vector<std::size_t> idx(kNumClasses);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    return idx;
}

}  // namespace detail

inline constexpr std::size_t kLimeChunk = 16;

inline LimeResult explain(const BatchClassifier& classify, const Tensor& image, const LimeParams& params) {
    detail::lime_stage("params", [&] {
        params.validate();
        return 0;
    });
    LimeResult res;
    res.params = params;
    res.segments = detail::lime_stage("segment", [&] { return segment_image(image, params.segmentation, params.segments, params.slic); });
    const std::size_t S = res.segments.count;
    if (params.num_samples < S)
        log_warning("lime: " + std::to_string(params.num_samples) + " samples for " + std::to_string(S) +
                    " segments; the surrogate is under-determined and relies on the ridge term");
    if (params.num_features > S)
        log_warning("lime: num_features " + std::to_string(params.num_features) + " exceeds segment count " +
                    std::to_string(S));

    const auto masks = detail::lime_stage("sample", [&] { return sample_masks(S, params.num_samples, params.seed); });

    std::vector<ProbVector> probs;
    detail::lime_stage("predict", [&] {
        const auto means = params.baseline == Baseline::segment_mean ? segment_means(image, res.segments)
                                                                     : std::vector<double>{};
        for (std::size_t lo = 0; lo < masks.size(); lo += kLimeChunk) {
            std::vector<Tensor> batch;
            for (std::size_t i = lo; i < std::min(masks.size(), lo + kLimeChunk); ++i)
                batch.push_back(apply_mask(image, res.segments, masks[i], params.baseline, means));
            auto p = classify(batch);
            if (p.size() != batch.size()) throw DimensionError("classifier returned a wrong batch size");
            for (const auto& v : p)
                for (double x : v)
                    if (!std::isfinite(x)) throw NumericError("classifier returned a non-finite probability");
            probs.insert(probs.end(), p.begin(), p.end());
        }
        return 0;
    });
    res.probs = probs[0];  // mask 0 is the unmodified image

    const auto kw = detail::lime_stage("kernel", [&] { return kernel_weights(masks, params.kernel_width); });
    const auto ranked = detail::ranked_classes(res.probs);
    const std::size_t labels = std::min(params.top_labels, kNumClasses);
    for (std::size_t li = 0; li < labels; ++li) {
        const std::size_t c = ranked[li];
        std::vector<double> y(masks.size());
        for (std::size_t i = 0; i < masks.size(); ++i) y[i] = probs[i][c];
        Explanation e;
        e.target = c;
        e.target_probability = res.probs[c];
        const auto s = detail::lime_stage("fit", [&] { return fit_surrogate(masks, y, kw.weights, params.ridge_lambda); });
        e.weights = s.beta;
        e.intercept = s.intercept;
        e.selected = select_top(e.weights, params.num_features);
        e.fidelity = weighted_r2(masks, y, kw.weights, s);
        e.local_prediction = surrogate_predict(s, masks[0]);
        e.zero_mask_samples = kw.zero_masks.size();
        res.explanations.push_back(std::move(e));
    }
    return res;
}

// Classifier over a network in eval mode; samples are spread over `threads`.
inline BatchClassifier net_classifier(const OctNet& net, unsigned threads = 1) {
    return [&net, threads](const std::vector<Tensor>& batch) {
        std::vector<ProbVector> out(batch.size());
        const unsigned T = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(batch.size())));
        auto work = [&](unsigned t) {
            for (std::size_t i = batch.size() * t / T; i < batch.size() * (t + 1) / T; ++i)
                out[i] = predict(net, batch[i]).probs;
        };
        if (T == 1) {
            work(0);
        } else {
            std::vector<std::jthread> pool;
            for (unsigned t = 0; t < T; ++t) pool.emplace_back(work, t);
        }
        return out;
    };
}

inline LimeResult explain(const OctNet& net, const Tensor& image, const LimeParams& params) {
    return explain(net_classifier(net, params.threads), image, params);
}

inline const char* baseline_name(Baseline b) { return b == Baseline::gray ? "gray" : "segment_mean"; }

inline nlohmann::json lime_params_json(const LimeParams& p) {
    return {{"num_samples", p.num_samples},
            {"top_labels", std::min(p.top_labels, kNumClasses)},
            {"num_features", p.num_features},
            {"seed", p.seed},
            {"kernel_width", p.kernel_width},
            {"ridge_lambda", p.ridge_lambda},
            {"baseline", baseline_name(p.baseline)},
            {"segmentation", segment_mode_name(p.segmentation)},
            {"segments_target", p.segments}};
}

inline nlohmann::json explanation_json(const Explanation& e) {
    nlohmann::json sel = nlohmann::json::array();
    for (const auto& s : e.selected) sel.push_back({{"segment", s.id}, {"weight", s.weight}});
    nlohmann::json j{{"class", class_name(static_cast<ClassLabel>(e.target))},
                     {"class_index", e.target},
                     {"probability", e.target_probability},
                     {"intercept", e.intercept},
                     {"weights", e.weights},
                     {"selected", sel},
                     {"local_prediction", e.local_prediction},
                     {"zero_mask_samples", e.zero_mask_samples}};
    j["fidelity_r2"] = e.fidelity ? nlohmann::json(*e.fidelity) : nlohmann::json(nullptr);
    j["fidelity_undefined"] = !e.fidelity.has_value();
    return j;
}

inline nlohmann::json lime_result_json(const LimeResult& r) {
    nlohmann::json probs;
    for (std::size_t c = 0; c < kNumClasses; ++c) probs[std::string(kClassNames[c])] = r.probs[c];
    nlohmann::json ex = nlohmann::json::array();
    for (const auto& e : r.explanations) ex.push_back(explanation_json(e));
    return {{"method", "lime"},
            {"probabilities", probs},
            {"segment_count", r.segments.count},
            {"params", lime_params_json(r.params)},
            {"explanations", ex}};
}

}  // namespace octx
