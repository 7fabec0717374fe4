#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "octx/datapipe.hpp"
#include "octx/log.hpp"
#include "octx/metrics.hpp"
#include "octx/octnet.hpp"
#include "octx/optim.hpp"

namespace octx {

struct EpochRecord;

enum class OptimizerKind { adam, sgd_momentum };

struct TrainConfig {
    std::size_t batch_size = 64;
    std::size_t epochs = 15;
    double learning_rate = 1e-3;
    OptimizerKind optimizer = OptimizerKind::adam;
    LossKind loss = LossKind::bce_sigmoid;
    std::uint64_t seed = 0;
    double conv_dropout = 0.25;
    double dense_dropout = 0.5;
    double momentum = 0.9;
    AdamConfig adam{};
    unsigned threads = 1;
    std::size_t prefetch_depth = 8;
    // Evaluate train/validation loss before the first update (history.initial).
    bool record_initial = false;
    std::function<Tensor(const SampleRef&)> loader;  // defaults to load_and_preprocess
    std::function<void(const EpochRecord&)> on_epoch;

    void validate() const {
        if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
        // 0 is accepted as a no-op smoke setting.
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
            throw ParameterError("learning_rate must be finite and >= 0");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ParameterError("momentum must lie in [0, 1)");
        check_dropout_rate(conv_dropout);
        check_dropout_rate(dense_dropout);
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double val_loss = 0.0;
    double val_acc = 0.0;
    std::size_t steps = 0;
    std::size_t skipped = 0;
};

struct RunHistory {
    std::vector<EpochRecord> epochs;  // one per completed epoch
    std::optional<EpochRecord> initial;
    std::size_t optimizer_steps = 0;

    std::string to_csv() const {
        std::ostringstream os;
        os << "epoch,train_loss,train_acc,val_loss,val_acc\n";
        char line[160];
        for (const auto& e : epochs) {
            std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.train_loss, e.train_acc,
                          e.val_loss, e.val_acc);
            os << line;
        }
        return os.str();
    }
};

struct EvalOptions {
    std::size_t batch_size = 64;
    unsigned threads = 1;
    std::size_t prefetch_depth = 8;
    LossKind loss = LossKind::bce_sigmoid;
    std::function<Tensor(const SampleRef&)> loader;
};

struct EvalResult {
    Metrics metrics;
    double mean_loss = 0.0;
    std::vector<std::size_t> truth;
    std::vector<std::size_t> predicted;
    std::size_t skipped = 0;
};

// Inference over a sample list in eval mode. Per-sample work is independent, so
// the merged counts do not depend on the thread count.
inline EvalResult evaluate_detailed(const OctNet& net, const std::vector<SampleRef>& samples,
                                    const EvalOptions& opt = {}) {
    if (samples.empty()) throw ParameterError("evaluate: empty sample list");
    BatchStream stream(samples, opt.batch_size, 0, StreamOptions{opt.prefetch_depth, false, opt.loader});
    EvalResult r;
    double loss_sum = 0.0;
    while (auto batch = stream.next()) {
        const std::size_t B = batch->size();
        const auto labels = detail::one_hot_labels(batch->images, batch->labels);
        std::vector<std::size_t> pred(B);
        std::vector<double> losses(B);
        const unsigned T = std::max(1u, std::min<unsigned>(opt.threads, static_cast<unsigned>(B)));
        auto work = [&](unsigned t) {
            for (std::size_t b = B * t / T; b < B * (t + 1) / T; ++b) {
                const auto tr = net.forward(detail::batch_item(batch->images, b), Mode::eval);
                pred[b] = argmax_index(tr.probs.data());
                losses[b] = sample_loss<float>(tr.logits, labels[b], opt.loss, nullptr);
            }
        };
        if (T == 1) {
            work(0);
        } else {
            std::vector<std::jthread> pool;
            for (unsigned t = 0; t < T; ++t) pool.emplace_back(work, t);
        }
        for (std::size_t b = 0; b < B; ++b) {
            loss_sum += losses[b];
            r.truth.push_back(labels[b]);
            r.predicted.push_back(pred[b]);
        }
    }
    r.skipped = stream.skipped();
    r.metrics = compute_metrics(r.truth, r.predicted);
    r.mean_loss = r.truth.empty() ? 0.0 : loss_sum / static_cast<double>(r.truth.size());
    return r;
}

inline Metrics evaluate(const OctNet& net, const std::vector<SampleRef>& samples, const EvalOptions& opt = {}) {
    return evaluate_detailed(net, samples, opt).metrics;
}

namespace detail {

inline EvalOptions eval_options_for(const TrainConfig& c) {
    return EvalOptions{c.batch_size, c.threads, c.prefetch_depth, c.loss, c.loader};
}

inline std::string fmt_loss(double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.4f", v);
    return b;
}

}  // namespace detail

// Trains `net` in place. Given a seed and a fixed thread count the run is
// bit-reproducible.
inline RunHistory train(OctNet& net, const Splits& splits, const TrainConfig& cfg) {
    cfg.validate();
    if (splits.train.empty()) throw ParameterError("train: empty training split");
    NetConfig nc = net.config();
    nc.conv_dropout = cfg.conv_dropout;
    nc.dense_dropout = cfg.dense_dropout;
    net.set_config(nc);

    RunHistory hist;
    const EvalOptions eopt = detail::eval_options_for(cfg);
    if (cfg.record_initial) {
        EpochRecord e;
        const auto tr = evaluate_detailed(net, splits.train, eopt);
        e.train_loss = tr.mean_loss;
        e.train_acc = tr.metrics.accuracy;
        if (!splits.validation.empty()) {
            const auto va = evaluate_detailed(net, splits.validation, eopt);
            e.val_loss = va.mean_loss;
            e.val_acc = va.metrics.accuracy;
        }
        hist.initial = e;
    }

    AdamState adam;
    MomentumState mom;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const std::uint64_t epoch_seed = detail::mix_seed(cfg.seed, epoch);
        BatchStream stream(splits.train, cfg.batch_size, epoch_seed,
                           StreamOptions{cfg.prefetch_depth, true, cfg.loader});
        EpochRecord rec;
        rec.epoch = epoch;
        double loss_sum = 0.0;
        std::size_t seen = 0, correct = 0, batch_index = 0;
        while (auto batch = stream.next()) {
            const auto lg = loss_and_grad(net, batch->images, batch->labels, cfg.loss, Mode::train,
                                          detail::mix_seed(epoch_seed, batch_index), cfg.threads);
            bool finite = std::isfinite(lg.loss);
            for (std::size_t k = 0; finite && k < lg.grads.size(); ++k) finite = lg.grads[k].all_finite();
            if (!finite)
                throw NumericError("non-finite loss or gradient at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(batch_index));
            if (cfg.optimizer == OptimizerKind::adam)
                adam_step(net.params(), lg.grads, adam, cfg.learning_rate, cfg.adam);
            else
                sgd_momentum_step(net.params(), lg.grads, mom, cfg.learning_rate, cfg.momentum);
            ++hist.optimizer_steps;
            ++rec.steps;
            loss_sum += lg.loss * static_cast<double>(lg.count);
            seen += lg.count;
            correct += lg.correct;
            ++batch_index;
        }
        rec.skipped = stream.skipped();
        if (seen == 0) throw DataError(DataErrorKind::empty, "epoch " + std::to_string(epoch) + " produced no samples");
        rec.train_loss = loss_sum / static_cast<double>(seen);
        rec.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
        if (!splits.validation.empty()) {
            const auto va = evaluate_detailed(net, splits.validation, eopt);
            rec.val_loss = va.mean_loss;
            rec.val_acc = va.metrics.accuracy;
        }
        hist.epochs.push_back(rec);
        log_info("epoch " + std::to_string(epoch) + "/" + std::to_string(cfg.epochs) + " train_loss " +
                 detail::fmt_loss(rec.train_loss) + " train_acc " + detail::fmt_loss(rec.train_acc) + " val_loss " +
                 detail::fmt_loss(rec.val_loss) + " val_acc " + detail::fmt_loss(rec.val_acc));
        if (cfg.on_epoch) cfg.on_epoch(rec);
    }
    return hist;
}

}  // namespace octx
