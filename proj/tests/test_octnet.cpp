#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "net_fd.hpp"
#include "octx/octnet.hpp"
#include "octx/weights_io.hpp"

using namespace octx;
namespace fs = std::filesystem;

namespace {

struct TableRow {
    const char* name;
    Shape in;
    Shape out;
    std::size_t params;
};

// Transcribed from the published architecture table.
const std::vector<TableRow> kTable = {
    {"Conv5D-64", {224, 224, 3}, {110, 110, 64}, 4864},
    {"Max Pooling", {110, 110, 64}, {54, 54, 64}, 0},
    {"Conv1D-32", {54, 54, 64}, {54, 54, 32}, 2080},
    {"Max Pooling", {54, 54, 32}, {26, 26, 32}, 0},
    {"Conv1D-128", {26, 26, 32}, {26, 26, 128}, 4224},
    {"Max Pooling", {26, 26, 128}, {12, 12, 128}, 0},
    {"Conv3D-128", {12, 12, 128}, {12, 12, 128}, 147584},
    {"Max Pooling", {12, 12, 128}, {5, 5, 128}, 0},
    {"Dropout", {5, 5, 128}, {5, 5, 128}, 0},
    {"Max Pooling", {5, 5, 128}, {2, 2, 128}, 0},
    {"Flatten", {2, 2, 128}, {512}, 0},
    {"Dense 1", {512}, {512}, 262656},
    {"Dropout", {512}, {512}, 0},
    {"Dense 2", {512}, {4}, 2052},
};

fs::path temp_path(const std::string& name) {
    return fs::temp_directory_path() / ("octx_test_" + std::to_string(::getpid()) + "_" + name);
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Tensor random_image_f(std::uint64_t seed) { return Tensor::cast(fdcheck::random_image(seed)); }

}  // namespace

TEST(OctNet, ParameterCountIsSeedIndependent) {
    for (std::uint64_t seed : {0ull, 1ull, 42ull, 123456789ull}) EXPECT_EQ(OctNet::build(seed).param_count(), 423460u);
}

TEST(OctNet, LayerTableMatchesPublishedRows) {
    const auto net = OctNet::build(1);
    ASSERT_EQ(net.layers().size(), kTable.size());
    std::size_t total = 0;
    for (std::size_t i = 0; i < kTable.size(); ++i) {
        EXPECT_EQ(net.layers()[i].name, kTable[i].name);
        EXPECT_EQ(net.layers()[i].in_shape, kTable[i].in) << i;
        EXPECT_EQ(net.layers()[i].out_shape, kTable[i].out) << i;
        EXPECT_EQ(net.layers()[i].param_count, kTable[i].params) << i;
        total += net.layers()[i].param_count;
    }
    EXPECT_EQ(total, 423460u);
    EXPECT_EQ(net.layers()[0].param_count, 4864u);
    EXPECT_EQ(net.layers()[6].param_count, 147584u);
}

TEST(OctNet, ForwardTraceShapesFollowTable) {
    const auto net = OctNet::build(2);
    const auto tr = net.forward(random_image_f(3));
    ASSERT_EQ(tr.outputs.size(), kTable.size());
    for (std::size_t i = 0; i < kTable.size(); ++i) EXPECT_EQ(tr.outputs[i].shape(), kTable[i].out) << i;
    EXPECT_EQ(tr.last_conv_activation().shape(), (Shape{12, 12, 128}));
    for (auto p : tr.probs.data()) {
        EXPECT_GT(p, 0.0f);
        EXPECT_LT(p, 1.0f);
    }
    for (const auto& m : tr.dropout_masks) EXPECT_TRUE(m.empty());
}

TEST(OctNet, WrongInputShapeThrows) {
    const OctNet net;
    EXPECT_THROW(net.forward(Tensor({224, 224, 1})), DimensionError);
}

TEST(OctNet, ZeroParametersGiveHalfProbabilities) {
    const OctNet net;  // default-constructed parameters are all zero
    const auto tr = net.forward(random_image_f(4));
    for (auto p : tr.probs.data()) EXPECT_EQ(p, 0.5f);
}

TEST(OctNet, EvalForwardIsDeterministic) {
    const auto net = OctNet::build(5);
    const auto img = random_image_f(6);
    const auto a = net.forward(img), b = net.forward(img);
    EXPECT_EQ(a.logits, b.logits);
    EXPECT_EQ(a.probs, b.probs);
}

TEST(Loss, KnownValues) {
    TensorD half({4});
    EXPECT_NEAR(sample_loss(half, 0, LossKind::bce_sigmoid, nullptr), -std::log(0.5), 1e-12);
    TensorD confident({4}, std::vector<double>{40, -40, -40, -40});
    EXPECT_LT(sample_loss(confident, 0, LossKind::bce_sigmoid, nullptr), 1e-6);
    EXPECT_LT(sample_loss(confident, 0, LossKind::softmax_ce, nullptr), 1e-6);
    // Clamped, not infinite.
    EXPECT_TRUE(std::isfinite(sample_loss(confident, 1, LossKind::bce_sigmoid, nullptr)));
}

TEST(Loss, AllHalfProbabilitiesGiveLn2) {
    const OctNet net;
    Tensor batch({2, 224, 224, 3}, 0.3f);
    Tensor oh({2, 4});
    oh[0] = 1;
    oh[4 + 2] = 1;
    const auto r = loss_and_grad(net, batch, oh);
    EXPECT_NEAR(r.loss, 0.693147, 1e-5);
    Tensor bad({2, 4});
    EXPECT_THROW(loss_and_grad(net, batch, bad), DimensionError);
}

TEST(Loss, GradientsMatchFiniteDifferences) {
    const auto net = BasicOctNet<double>::build(8);
    TensorD batch({2, 224, 224, 3});
    for (std::size_t b = 0; b < 2; ++b) {
        const auto img = fdcheck::random_image(9 + b);
        std::copy(img.data().begin(), img.data().end(), batch.raw() + b * img.size());
    }
    TensorD oh({2, 4});
    oh[1] = 1;
    oh[4 + 3] = 1;
    const auto bce = fdcheck::check_net_gradients(net, batch, oh, LossKind::bce_sigmoid, Mode::train, 12, 10);
    EXPECT_LT(bce.max_relative_error, 1e-4);
    const auto ce = fdcheck::check_net_gradients(net, batch, oh, LossKind::softmax_ce, Mode::eval, 8, 11);
    EXPECT_LT(ce.max_relative_error, 1e-4);
}

TEST(Loss, ThreadedGradientsMatchSingleThreaded) {
    const auto net = OctNet::build(12);
    Tensor batch({3, 224, 224, 3});
    for (std::size_t b = 0; b < 3; ++b) {
        const auto img = random_image_f(13 + b);
        std::copy(img.data().begin(), img.data().end(), batch.raw() + b * img.size());
    }
    Tensor oh({3, 4});
    oh[0] = oh[5] = oh[10] = 1;
    const auto a = loss_and_grad(net, batch, oh, LossKind::bce_sigmoid, Mode::train, 3, 1);
    const auto b = loss_and_grad(net, batch, oh, LossKind::bce_sigmoid, Mode::train, 3, 2);
    EXPECT_NEAR(a.loss, b.loss, 1e-12);
    for (std::size_t t = 0; t < a.grads.size(); ++t)
        for (std::size_t i = 0; i < a.grads[t].size(); i += 97) EXPECT_NEAR(a.grads[t][i], b.grads[t][i], 1e-9);
}

TEST(Predict, ArgmaxWithLowestIndexTieBreak) {
    EXPECT_EQ(argmax_index(std::array<double, 4>{0.9, 0.1, 0.2, 0.3}), 0u);
    EXPECT_EQ(argmax_index(std::array<double, 4>{0.5, 0.5, 0.5, 0.5}), 0u);
    EXPECT_EQ(argmax_index(std::array<double, 4>{0.1, 0.7, 0.7, 0.3}), 1u);
    const OctNet zero;
    EXPECT_EQ(predict(zero, random_image_f(14)).label, ClassLabel::CNV);
}

TEST(Predict, LabelInvariantUnderMonotoneHead) {
    std::mt19937_64 rng(15);
    std::normal_distribution<double> n(0, 4);
    for (int i = 0; i < 1000; ++i) {
        std::array<double, 4> z{}, s{}, cube{};
        for (std::size_t c = 0; c < 4; ++c) {
            z[c] = n(rng);
            s[c] = sigmoid(z[c]);
            cube[c] = z[c] * z[c] * z[c] + 2 * z[c];
        }
        EXPECT_EQ(argmax_index(z), argmax_index(s));
        EXPECT_EQ(argmax_index(z), argmax_index(cube));
    }
}

TEST(Weights, RoundTripIsBitExactAndSized) {
    const auto net = OctNet::build(16);
    const auto p1 = temp_path("w1.octx"), p2 = temp_path("w2.octx");
    save_weights(net, p1);
    const auto loaded = load_weights(p1);
    for (std::size_t t = 0; t < net.params().size(); ++t) ASSERT_EQ(net.params()[t], loaded.params()[t]);
    save_weights(loaded, p2);
    EXPECT_EQ(read_bytes(p1), read_bytes(p2));
    EXPECT_EQ(weight_payload_bytes(net), 1693840u);
    EXPECT_LT(fs::file_size(p1), 2000000u);
    EXPECT_GT(fs::file_size(p1), 1693840u);
    fs::remove(p1);
    fs::remove(p2);
}

TEST(Weights, ConfigSurvivesRoundTrip) {
    NetConfig cfg;
    cfg.conv_dropout = 0.1;
    cfg.dense_dropout = 0.3;
    cfg.head = OutputHead::softmax;
    const auto net = OctNet::build(17, cfg);
    const auto back = deserialize_weights(serialize_weights(net));
    EXPECT_NEAR(back.config().conv_dropout, 0.1, 1e-7);
    EXPECT_NEAR(back.config().dense_dropout, 0.3, 1e-7);
    EXPECT_EQ(back.config().head, OutputHead::softmax);
}

TEST(Weights, DistinctLoadErrors) {
    const auto good = serialize_weights(OctNet::build(18));
    auto kind_of = [](std::vector<std::uint8_t> b) {
        try {
            deserialize_weights(b);
        } catch (const WeightFileError& e) {
            return e.kind();
        }
        return WeightErrorKind::io;
    };
    auto bad_magic = good;
    bad_magic[0] = 'X';
    EXPECT_EQ(kind_of(bad_magic), WeightErrorKind::magic);
    auto bad_version = good;
    bad_version[4] = 9;
    EXPECT_EQ(kind_of(bad_version), WeightErrorKind::version);
    auto truncated = good;
    truncated.resize(truncated.size() / 2);
    EXPECT_EQ(kind_of(truncated), WeightErrorKind::truncated);
    auto corrupt = good;
    corrupt[corrupt.size() - 1000] ^= 0x01;
    EXPECT_EQ(kind_of(corrupt), WeightErrorKind::checksum);
    auto arch = good;
    arch[6] = 3;  // descriptor count
    EXPECT_EQ(kind_of(arch), WeightErrorKind::architecture);
    EXPECT_THROW(load_weights("/nonexistent/dir/w.octx"), WeightFileError);
}
