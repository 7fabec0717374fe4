#pragma once

// Synthetic 4-class images with class-distinct structure plus noise, used as a
// desk-scale learning benchmark. Every pixel is a pure function of
// (seed, class, index), so datasets are reproducible across platforms.

#include <cmath>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "octx/classes.hpp"
#include "octx/datapipe.hpp"
#include "octx/image_io.hpp"
#include "octx/layers.hpp"
#include "octx/octnet.hpp"

namespace octx::toy {

struct ToyOptions {
    std::size_t size = 224;
    double noise_sigma = 0.08;
};

namespace detail {

// Stream of uniforms for one image.
struct Draws {
    std::uint64_t key;
    std::uint64_t n = 0;
    double uniform() { return counter_uniform(key, n++); }
    double range(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal() {
        const double u1 = std::max(uniform(), 1e-12), u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }
};

}  // namespace detail

// CNV: horizontal stripes; DME: bright blobs; DRUSEN: checkerboard;
// NORMAL: a single smooth bright band. Random frequency, phase, placement and
// contrast per image, additive Gaussian noise, one 8-bit gray channel.
inline Image8 generate(ClassLabel label, std::uint64_t seed, std::size_t index, const ToyOptions& opt = {}) {
    using octx::detail::mix_seed;
    detail::Draws d{mix_seed(mix_seed(seed, index_of(label) + 1), index)};
    const std::size_t N = opt.size;
    const double fn = static_cast<double>(N);
    std::vector<double> v(N * N, 0.0);
    const double lo = d.range(0.05, 0.25), hi = d.range(0.7, 0.95);
    switch (label) {
        case ClassLabel::CNV: {
            const double period = d.range(14.0, 24.0), phase = d.range(0.0, 2.0 * std::numbers::pi);
            for (std::size_t y = 0; y < N; ++y)
                for (std::size_t x = 0; x < N; ++x) {
                    const double s = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * y / period + phase);
                    v[y * N + x] = lo + (hi - lo) * s;
                }
            break;
        }
        case ClassLabel::DME: {
            for (auto& p : v) p = lo;
            const int blobs = 3 + static_cast<int>(d.uniform() * 4.0);
            for (int b = 0; b < blobs; ++b) {
                const double cy = d.range(0.15, 0.85) * fn, cx = d.range(0.15, 0.85) * fn;
                const double r = d.range(14.0, 26.0);
                for (std::size_t y = 0; y < N; ++y)
                    for (std::size_t x = 0; x < N; ++x) {
                        const double dy = y - cy, dx = x - cx;
                        const double g = std::exp(-(dy * dy + dx * dx) / (2.0 * r * r));
                        v[y * N + x] = std::max(v[y * N + x], lo + (hi - lo) * g);
                    }
            }
            break;
        }
        case ClassLabel::DRUSEN: {
            const double cell = d.range(14.0, 24.0), oy = d.range(0.0, cell), ox = d.range(0.0, cell);
            for (std::size_t y = 0; y < N; ++y)
                for (std::size_t x = 0; x < N; ++x) {
                    const auto iy = static_cast<long>(std::floor((y + oy) / cell));
                    const auto ix = static_cast<long>(std::floor((x + ox) / cell));
                    v[y * N + x] = ((iy + ix) & 1) ? hi : lo;
                }
            break;
        }
        case ClassLabel::NORMAL: {
            const double cy = d.range(0.3, 0.7) * fn, w = d.range(10.0, 20.0);
            const double tilt = d.range(-0.15, 0.15);
            for (std::size_t y = 0; y < N; ++y)
                for (std::size_t x = 0; x < N; ++x) {
                    const double dy = y - (cy + tilt * (x - fn / 2.0));
                    v[y * N + x] = lo + (hi - lo) * std::exp(-dy * dy / (2.0 * w * w));
                }
            break;
        }
    }
    Image8 img(N, N, 1);
    for (std::size_t i = 0; i < N * N; ++i) img.pixels[i] = to_u8(v[i] + opt.noise_sigma * d.normal());
    return img;
}

inline std::string file_name(ClassLabel label, std::size_t index) {
    return std::string(class_name(label)) + "-" + std::to_string(900000 + index) + "-1.png";
}

// Writes `per_class` PNGs per class under root/<CLASS>/ and returns their refs,
// class-major.
inline std::vector<SampleRef> write_split(const std::filesystem::path& root, std::size_t per_class,
                                         std::uint64_t seed, std::size_t first_index = 0,
                                         const ToyOptions& opt = {}) {
    std::vector<SampleRef> refs;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        const auto label = static_cast<ClassLabel>(c);
        const auto dir = root / std::string(class_name(label));
        std::filesystem::create_directories(dir);
        for (std::size_t i = 0; i < per_class; ++i) {
            const auto path = dir / file_name(label, first_index + i);
            write_png(path, generate(label, seed, first_index + i, opt));
            refs.push_back(make_sample_ref(path, label));
        }
    }
    return refs;
}

struct ToyDataset {
    std::vector<SampleRef> train;
    std::vector<SampleRef> test;
};

// root/train/<CLASS>/ and root/test/<CLASS>/ with disjoint image indices.
inline ToyDataset write_dataset(const std::filesystem::path& root, std::size_t train_per_class,
                                std::size_t test_per_class, std::uint64_t seed, const ToyOptions& opt = {}) {
    ToyDataset ds;
    ds.train = write_split(root / "train", train_per_class, seed, 0, opt);
    ds.test = write_split(root / "test", test_per_class, seed, train_per_class, opt);
    return ds;
}

}  // namespace octx::toy
