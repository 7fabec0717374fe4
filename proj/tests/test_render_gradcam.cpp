#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "net_fd.hpp"
#include "octx/gradcam.hpp"
#include "octx/render.hpp"

using namespace octx;

namespace {

Tensor noise_image(std::uint64_t seed) {
    Tensor t({kImageSize, kImageSize, 3});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(0.8 * counter_uniform(seed, i));
    return t;
}

double channel_mean(const Image8& img, const SegmentMap& seg, std::uint32_t id, std::size_t c) {
    double s = 0;
    std::size_t n = 0;
    for (std::size_t p = 0; p < seg.labels.size(); ++p)
        if (seg.labels[p] == id) {
            s += img.pixels[p * 3 + c];
            ++n;
        }
    return s / n;
}

// Independent piecewise-linear jet-style ramp.
std::array<double, 3> ramp_oracle(double h) {
    const double xs[] = {0.0, 0.125, 0.375, 0.625, 0.875, 1.0};
    const double cs[][3] = {{0, 0, 0.5}, {0, 0, 1}, {0, 1, 1}, {1, 1, 0}, {1, 0, 0}, {1, 0, 0}};
    for (int i = 0; i < 5; ++i)
        if (h <= xs[i + 1]) {
            const double f = (h - xs[i]) / (xs[i + 1] - xs[i]);
            return {cs[i][0] + f * (cs[i + 1][0] - cs[i][0]), cs[i][1] + f * (cs[i + 1][1] - cs[i][1]),
                    cs[i][2] + f * (cs[i + 1][2] - cs[i][2])};
        }
    return {1, 0, 0};
}

}  // namespace

TEST(Overlay, NoSelectionReturnsInput) {
    const auto img = noise_image(1);
    const auto seg = segment_grid(224, 224, 16);
    const auto ref = to_image8(img);
    EXPECT_EQ(render_overlay(img, seg, std::vector<SelectedSegment>{}, OverlayMode::positive_only).pixels, ref.pixels);
    EXPECT_EQ(render_overlay(img, seg, std::vector<SelectedSegment>{}, OverlayMode::pos_neg).pixels, ref.pixels);
}

TEST(Overlay, PositiveSegmentGainsGreenOnlyThere) {
    const auto img = noise_image(2);
    const auto seg = segment_grid(224, 224, 16);
    const auto ref = to_image8(img);
    const auto out = render_overlay(img, seg, {{5, 0.3}}, OverlayMode::positive_only);
    EXPECT_GT(channel_mean(out, seg, 5, 1), channel_mean(ref, seg, 5, 1));
    for (std::size_t p = 0; p < seg.labels.size(); ++p)
        if (seg.labels[p] != 5)
            for (std::size_t c = 0; c < 3; ++c) ASSERT_EQ(out.pixels[p * 3 + c], ref.pixels[p * 3 + c]);
}

TEST(Overlay, PosNegShowsGreenAndRed) {
    const auto img = noise_image(3);
    const auto seg = segment_grid(224, 224, 16);
    const auto ref = to_image8(img);
    const std::vector<SelectedSegment> sel{{1, 0.4}, {2, -0.2}};
    const auto pn = render_overlay(img, seg, sel, OverlayMode::pos_neg);
    EXPECT_GT(channel_mean(pn, seg, 1, 1), channel_mean(ref, seg, 1, 1));
    EXPECT_GT(channel_mean(pn, seg, 2, 0), channel_mean(ref, seg, 2, 0));
    EXPECT_LT(channel_mean(pn, seg, 2, 1), channel_mean(ref, seg, 2, 1));
    // positive_only ignores the negative segment.
    const auto po = render_overlay(img, seg, sel, OverlayMode::positive_only);
    EXPECT_EQ(channel_mean(po, seg, 2, 0), channel_mean(ref, seg, 2, 0));
    // Exact blend on one pixel of the green segment.
    const std::size_t p = 0 * 224 + 60;  // row 0, column 60 -> segment 1 in a 4x4 grid
    ASSERT_EQ(seg.labels[p], 1u);
    EXPECT_EQ(pn.pixels[p * 3 + 1], to_u8(0.6 * img[p * 3 + 1] + 0.4));
}

TEST(Overlay, BoundariesOutlineSegments) {
    const auto img = noise_image(4);
    const auto seg = segment_grid(224, 224, 4);
    const auto out = render_overlay(img, seg, std::vector<SelectedSegment>{}, OverlayMode::boundaries);
    const auto at = [&](std::size_t y, std::size_t x, std::size_t c) { return out.pixels[(y * 224 + x) * 3 + c]; };
    EXPECT_EQ(at(50, 111, 0), 255);
    EXPECT_EQ(at(50, 112, 1), 255);
    EXPECT_EQ(at(50, 112, 2), 0);
    EXPECT_EQ(at(50, 50, 0), to_u8(img[(50 * 224 + 50) * 3]));
}

TEST(Heatmap, AlphaZeroIsIdentity) {
    const auto img = noise_image(5);
    TensorD h({224, 224});
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = counter_uniform(9, i);
    EXPECT_EQ(render_heatmap(img, h, 0.0).pixels, to_image8(img).pixels);
}

TEST(Heatmap, AllOnesIsUniformRedTint) {
    const auto img = noise_image(6);
    const TensorD h({224, 224}, 1.0);
    const auto out = render_heatmap(img, h, 0.5);
    for (std::size_t p = 0; p < 224 * 224; ++p) {
        ASSERT_EQ(out.pixels[p * 3 + 0], to_u8(0.5 * img[p * 3 + 0] + 0.5));
        ASSERT_EQ(out.pixels[p * 3 + 1], to_u8(0.5 * img[p * 3 + 1]));
        ASSERT_EQ(out.pixels[p * 3 + 2], to_u8(0.5 * img[p * 3 + 2]));
    }
}

TEST(Heatmap, BlendMatchesFormulaPerPixel) {
    const auto img = noise_image(7);
    TensorD h({224, 224});
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = counter_uniform(3, i);
    const double a = 0.35;
    const auto out = render_heatmap(img, h, a);
    for (std::size_t p = 0; p < 224 * 224; p += 97) {
        const auto r = ramp_oracle(h[p]);
        for (std::size_t c = 0; c < 3; ++c) {
            const double expect = 255.0 * ((1 - a) * img[p * 3 + c] + a * r[c]);
            // 8-bit ramp table + output rounding
            ASSERT_NEAR(out.pixels[p * 3 + c], expect, 1.5) << p << " " << c;
        }
    }
    EXPECT_EQ(kJetLut[0], (std::array<std::uint8_t, 3>{0, 0, 128}));
    EXPECT_EQ(kJetLut[255], (std::array<std::uint8_t, 3>{255, 0, 0}));
}

TEST(GradCam, HandChainRuleInstance) {
    // y = sum V .* A, so dy/dA = V. Maps (2x2, channel-last):
    //   A0 = [[1,2],[3,4]]  A1 = [[0,1],[1,0]]
    //   V0 = [[1,0],[0,1]]  V1 = [[-1,-1],[-1,-1]]
    // alpha0 = 0.5, alpha1 = -1, raw = ReLU(0.5 A0 - A1) = [[0.5,0],[0.5,2]].
    TensorD A({2, 2, 2}, std::vector<double>{1, 0, 2, 1, 3, 1, 4, 0});
    TensorD V({2, 2, 2}, std::vector<double>{1, -1, 0, -1, 0, -1, 1, -1});
    const auto r = gradcam_core(A, V);
    EXPECT_NEAR(r.alphas[0], 0.5, 1e-12);
    EXPECT_NEAR(r.alphas[1], -1.0, 1e-12);
    const double expect[] = {0.5, 0.0, 0.5, 2.0};
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(r.raw[i], expect[i], 1e-6);
}

TEST(GradCam, SingleMapUpsamplesProportionally) {
    TensorD A({12, 12, 3}), dA({12, 12, 3});
    for (std::size_t p = 0; p < 144; ++p) {
        A[p * 3 + 1] = 0.1 + counter_uniform(1, p);
        A[p * 3 + 0] = counter_uniform(2, p);
        dA[p * 3 + 1] = 0.25;
    }
    const auto core = gradcam_core(A, dA);
    bool empty = true;
    const auto up = upsample_heat(core.raw, 224, empty);
    EXPECT_FALSE(empty);
    TensorD map({12, 12, 1});
    for (std::size_t p = 0; p < 144; ++p) map[p] = A[p * 3 + 1];
    const auto ref = resize_bilinear(map, 224, 224);
    double mx = 0;
    for (double v : ref.data()) mx = std::max(mx, v);
    for (std::size_t i = 0; i < up.size(); ++i) ASSERT_NEAR(up[i], ref[i] / mx, 1e-12);
    EXPECT_EQ(*std::max_element(up.data().begin(), up.data().end()), 1.0);
}

TEST(GradCam, ZeroClassWeightsGiveEmptyMap) {
    auto net = OctNet::build(2);
    auto& w = net.params()[10];  // Dense 2 weights, 512 x 4
    for (std::size_t i = 0; i < 512; ++i) w[i * 4 + 2] = 0.0f;
    const auto h = gradcam(net, noise_image(8), 2);
    EXPECT_TRUE(h.empty);
    for (double v : h.raw.data()) EXPECT_EQ(v, 0.0);
    for (double v : h.upsampled.data()) EXPECT_EQ(v, 0.0);
}

TEST(GradCam, NonNegativeDeterministicAndScaleInvariant) {
    const auto net = OctNet::build(3);
    const auto img = noise_image(9);
    const auto a = gradcam(net, img, 1);
    const auto b = gradcam(net, img, 1);
    EXPECT_EQ(a.raw, b.raw);
    EXPECT_EQ(a.raw.dim(0), 12u);
    EXPECT_EQ(a.upsampled.dim(0), 224u);
    for (double v : a.raw.data()) EXPECT_GE(v, 0.0);
    const auto s = gradcam(net, img, 1, 7.5);
    EXPECT_EQ(s.empty, a.empty);
    for (std::size_t i = 0; i < a.upsampled.size(); ++i) ASSERT_NEAR(s.upsampled[i], a.upsampled[i], 1e-5);
    EXPECT_THROW(gradcam(net, img, 4), ParameterError);
}

TEST(GradCam, ActivationGradientMatchesFiniteDifferences) {
    const auto net = BasicOctNet<double>::build(4);
    const auto img = fdcheck::random_image(5);
    const std::size_t cls = 3;
    const auto tr = net.forward(img, Mode::eval);
    TensorD seed(tr.logits.shape());
    seed[cls] = 1.0;
    const auto dA = net.backward(tr, seed, nullptr, static_cast<int>(kLastConvLayer));
    auto A = tr.last_conv_activation();
    // Strictly positive activations: exact zeros tie inside pooling windows,
    // where the one-sided differences disagree. Routed and unrouted entries.
    std::vector<std::size_t> idx;
    std::size_t routed = 0;
    for (std::size_t i : sample_indices(A.size(), 2000, 6)) {
        if (!(A[i] > 1e-3) || idx.size() >= 40) continue;
        if (dA[i] != 0.0) {
            if (routed >= 30) continue;
            ++routed;
        } else if (idx.size() - routed >= 10) {
            continue;
        }
        idx.push_back(i);
    }
    ASSERT_GE(routed, 20u);
    const double eps = 1e-6;
    double worst = 0;
    for (std::size_t i : idx) {
        const double orig = A[i];
        A[i] = orig + eps;
        const double fp = net.tail_logits(kLastConvLayer, A)[cls];
        A[i] = orig - eps;
        const double fm = net.tail_logits(kLastConvLayer, A)[cls];
        A[i] = orig;
        worst = std::max(worst, relative_error(dA[i], (fp - fm) / (2 * eps), 1e-7));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(GradCam, RawGridText) {
    TensorD raw({2, 3}, std::vector<double>{0, 0.5, 1, 2, 3, 0.125});
    EXPECT_EQ(raw_grid_text(raw), "0 0.5 1\n2 3 0.125\n");
}
