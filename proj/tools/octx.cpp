// octx command-line front end: train, evaluate, explain, serve, synth.
//
// Exit codes: 0 ok, 1 usage / parameter error, 2 data error, 3 numeric error,
// 4 I/O error.

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "octx/explain_panels.hpp"
#include "octx/http_server.hpp"
#include "octx/service.hpp"
#include "octx/toy_data.hpp"
#include "octx/trainer.hpp"
#include "octx/weights_io.hpp"

namespace fs = std::filesystem;
using namespace octx;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3, kIo = 4 };

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out || !(out << text) || !out.flush()) throw IoError("cannot write " + path.string());
}

fs::path sibling(const fs::path& weights, const std::string& suffix) {
    return weights.parent_path() / (weights.stem().string() + suffix);
}

struct TrainArgs {
    std::string data, test_data, out, init, history, report;
    std::size_t epochs = 15, batch = 64, prefetch = 8;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    std::string loss = "bce", optimizer = "adam";
    unsigned threads = 1;
};

int run_train(const TrainArgs& a) {
    TrainConfig cfg;
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch;
    cfg.learning_rate = a.lr;
    cfg.seed = a.seed;
    cfg.loss = a.loss == "ce" ? LossKind::softmax_ce : LossKind::bce_sigmoid;
    cfg.optimizer = a.optimizer == "sgd" ? OptimizerKind::sgd_momentum : OptimizerKind::adam;
    cfg.threads = a.threads;
    cfg.prefetch_depth = a.prefetch;

    Splits splits;
    if (a.test_data.empty()) {
        splits = split_dataset(scan_dataset(a.data), a.seed);
    } else {
        // Held-out directory given: train on everything under --data, validate
        // and report on --test-data.
        splits.train = scan_dataset(a.data).samples;
        splits.validation = splits.test = scan_dataset(a.test_data).samples;
        splits.seed = a.seed;
    }
    log_info("train " + std::to_string(splits.train.size()) + ", validation " +
             std::to_string(splits.validation.size()) + ", test " + std::to_string(splits.test.size()));

    OctNet net = a.init.empty() ? OctNet::build(a.seed) : load_weights(a.init);
    const auto history = train(net, splits, cfg);
    save_weights(net, a.out);

    const fs::path out(a.out);
    write_text(a.history.empty() ? sibling(out, ".history.csv") : fs::path(a.history), history.to_csv());
    write_split_manifest(splits, sibling(out, ".splits.txt"));
    std::string report = "no test samples\n";
    if (!splits.test.empty()) {
        EvalOptions eo{cfg.batch_size, cfg.threads, cfg.prefetch_depth, cfg.loss, {}};
        report = format_report(evaluate(net, splits.test, eo));
    }
    write_text(a.report.empty() ? sibling(out, ".report.txt") : fs::path(a.report), report);
    std::cout << report;
    return kOk;
}

int run_evaluate(const std::string& weights, const std::string& data, const std::string& report_path,
                 unsigned threads) {
    const OctNet net = load_weights(weights);
    EvalOptions eo;
    eo.threads = threads;
    const auto res = evaluate_detailed(net, scan_dataset(data).samples, eo);
    const auto report = format_report(res.metrics);
    if (!report_path.empty()) write_text(report_path, report);
    std::cout << report;
    return kOk;
}

struct ExplainArgs {
    std::string weights, image, out = "explain_out", cls;
    ExplainRequest req;
};

int run_explain_cmd(ExplainArgs a) {
    const OctNet net = load_weights(a.weights);
    if (!a.cls.empty()) {
        const auto c = parse_class(a.cls);
        if (!c) throw ParameterError("unknown class '" + a.cls + "'");
        a.req.gradcam_class = index_of(*c);
    }
    // Same decode/preprocess path as the service applies to uploaded bytes.
    const auto bytes = read_file_bytes(a.image);
    const auto image = preprocess(decode_image(bytes, a.image));
    const auto art = run_explain(net, image, a.req);

    const fs::path dir(a.out);
    fs::create_directories(dir);
    for (const auto& p : art.panels) write_file_bytes(dir / p.file, p.png);
    nlohmann::json doc{{"image", a.image},
                       {"image_id", sha256_hex(bytes.data(), bytes.size())},
                       {"params", explain_params_json(a.req)},
                       {"explanation", art.data}};
    write_text(dir / "explanation.json", doc.dump(2) + "\n");
    if (!art.gradcam_raw.empty()) write_text(dir / "gradcam_raw.txt", art.gradcam_raw);
    for (const auto& p : art.panels) std::cout << (dir / p.file).string() << '\n';
    return kOk;
}

httplib::Server* g_server = nullptr;

void on_signal(int) {
    if (g_server) g_server->stop();
}

int run_serve(ServiceConfig cfg) {
    cfg.validate();
    if (cfg.weights.empty()) throw ParameterError("serve: no weights configured (--weights or config file)");
    auto net = std::make_shared<const OctNet>(load_weights(cfg.weights));
    ReviewService svc(cfg, net);
    if (svc.review_log().skipped_lines())
        log_warning("review log: " + std::to_string(svc.review_log().skipped_lines()) + " damaged line(s) skipped");
    httplib::Server server;
    install_routes(server, svc);
    const int port = cfg.port == 0 ? server.bind_to_any_port(cfg.host) : cfg.port;
    if (cfg.port != 0 && !server.bind_to_port(cfg.host, cfg.port)) throw IoError("cannot bind " + cfg.host + ":" + std::to_string(cfg.port));
    if (port < 0) throw IoError("cannot bind " + cfg.host);
    g_server = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    std::cout << "listening on http://" << cfg.host << ':' << port << std::endl;
    server.listen_after_bind();
    g_server = nullptr;
    return kOk;
}

int run_synth(const std::string& out, std::size_t train_pc, std::size_t test_pc, std::uint64_t seed) {
    const auto ds = toy::write_dataset(out, train_pc, test_pc, seed);
    std::cout << "wrote " << ds.train.size() << " train and " << ds.test.size() << " test images to " << out
              << '\n';
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"octx: retinal OCT classifier, explanations and review service"};
    app.require_subcommand(1);

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "train a model on a 4-class image directory");
    train_cmd->add_option("--data", ta.data, "dataset root with CNV/ DME/ DRUSEN/ NORMAL/")->required();
    train_cmd->add_option("--test-data", ta.test_data, "held-out root; disables the automatic split");
    train_cmd->add_option("--out", ta.out, "output weights file")->required();
    train_cmd->add_option("--epochs", ta.epochs)->capture_default_str();
    train_cmd->add_option("--batch", ta.batch)->capture_default_str();
    train_cmd->add_option("--lr", ta.lr)->capture_default_str();
    train_cmd->add_option("--seed", ta.seed)->capture_default_str();
    train_cmd->add_option("--loss", ta.loss)->check(CLI::IsMember({"bce", "ce"}))->capture_default_str();
    train_cmd->add_option("--optimizer", ta.optimizer)->check(CLI::IsMember({"adam", "sgd"}))->capture_default_str();
    train_cmd->add_option("--init", ta.init, "start from these weights instead of a fresh init");
    train_cmd->add_option("--history", ta.history, "history CSV (default <out>.history.csv)");
    train_cmd->add_option("--report", ta.report, "metrics report (default <out>.report.txt)");
    train_cmd->add_option("--threads", ta.threads)->capture_default_str();
    train_cmd->add_option("--prefetch", ta.prefetch)->capture_default_str();

    std::string ev_weights, ev_data, ev_report;
    unsigned ev_threads = 1;
    auto* eval_cmd = app.add_subcommand("evaluate", "evaluate weights on every image under a directory");
    eval_cmd->add_option("--weights", ev_weights)->required();
    eval_cmd->add_option("--data", ev_data)->required();
    eval_cmd->add_option("--report", ev_report);
    eval_cmd->add_option("--threads", ev_threads)->capture_default_str();

    ExplainArgs ea;
    std::string segmentation = "grid";
    auto* explain_cmd = app.add_subcommand("explain", "write LIME / Grad-CAM panels for one image");
    explain_cmd->add_option("--weights", ea.weights)->required();
    explain_cmd->add_option("--image", ea.image)->required();
    explain_cmd->add_option("--method", ea.req.method)
        ->check(CLI::IsMember({"lime", "gradcam", "all"}))
        ->capture_default_str();
    explain_cmd->add_option("--samples", ea.req.lime.num_samples)->capture_default_str();
    explain_cmd->add_option("--top-labels", ea.req.lime.top_labels)->capture_default_str();
    explain_cmd->add_option("--features", ea.req.lime.num_features)->capture_default_str();
    explain_cmd->add_option("--features-wide", ea.req.features_wide)->capture_default_str();
    explain_cmd->add_option("--seed", ea.req.lime.seed)->capture_default_str();
    explain_cmd->add_option("--segments", ea.req.lime.segments)->capture_default_str();
    explain_cmd->add_option("--segmentation", segmentation)->check(CLI::IsMember({"grid", "slic"}))->capture_default_str();
    explain_cmd->add_option("--class", ea.cls, "Grad-CAM target (default: predicted class)");
    explain_cmd->add_option("--threads", ea.req.lime.threads)->capture_default_str();
    explain_cmd->add_option("--out", ea.out, "output directory")->capture_default_str();

    ServiceConfig sc;
    std::string config_path, s_weights, s_host, s_storage, s_static;
    std::optional<int> s_port;
    std::optional<std::size_t> s_max_upload;
    auto* serve_cmd = app.add_subcommand("serve", "run the HTTP review service");
    serve_cmd->add_option("--config", config_path, "JSON config (default: $OCTX_CONFIG)");
    serve_cmd->add_option("--weights", s_weights);
    serve_cmd->add_option("--host", s_host);
    serve_cmd->add_option("--port", s_port, "0 picks a free port");
    serve_cmd->add_option("--storage", s_storage, "image store and audit log directory");
    serve_cmd->add_option("--static", s_static, "built UI bundle served at /");
    serve_cmd->add_option("--max-upload", s_max_upload, "bytes");

    std::string sy_out;
    std::size_t sy_train = 100, sy_test = 20;
    std::uint64_t sy_seed = 42;
    auto* synth_cmd = app.add_subcommand("synth", "write the synthetic 4-class toy dataset");
    synth_cmd->add_option("--out", sy_out)->required();
    synth_cmd->add_option("--train-per-class", sy_train)->capture_default_str();
    synth_cmd->add_option("--test-per-class", sy_test)->capture_default_str();
    synth_cmd->add_option("--seed", sy_seed)->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train_cmd) return run_train(ta);
        if (*eval_cmd) return run_evaluate(ev_weights, ev_data, ev_report, ev_threads);
        if (*explain_cmd) {
            ea.req.lime.segmentation = segmentation == "slic" ? SegmentMode::slic : SegmentMode::grid;
            return run_explain_cmd(ea);
        }
        if (*serve_cmd) {
            if (config_path.empty())
                if (const char* env = std::getenv("OCTX_CONFIG")) config_path = env;
            if (!config_path.empty()) sc = load_service_config(config_path);
            if (!s_weights.empty()) sc.weights = s_weights;
            if (!s_host.empty()) sc.host = s_host;
            if (s_port) sc.port = *s_port;
            if (!s_storage.empty()) sc.storage_dir = s_storage;
            if (!s_static.empty()) sc.static_dir = s_static;
            if (s_max_upload) sc.max_upload_bytes = *s_max_upload;
            return run_serve(sc);
        }
        if (*synth_cmd) return run_synth(sy_out, sy_train, sy_test, sy_seed);
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const DecodeError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kNumeric;
    } catch (const WeightFileError& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kIo;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kIo;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kIo;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kIo;
    }
    return kUsage;
}
