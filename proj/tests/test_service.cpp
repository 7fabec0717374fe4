#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "httplib.h"
#include "octx/http_server.hpp"
#include "octx/service.hpp"
#include "octx/toy_data.hpp"
#include "proc.hpp"

using namespace octx;
using octx::testing::Child;
using octx::testing::ScratchDir;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ReviewRecord sample_record(const std::string& image_id, Decision d, std::optional<ClassLabel> corrected = {}) {
    ReviewRecord r;
    r.image_id = image_id;
    r.image_path = "/store/" + image_id;
    r.predicted = ClassLabel::DME;
    r.probs = {0.1, 0.7, 0.15, 0.05};
    r.decision = d;
    r.corrected = corrected;
    r.note = "tab\tand \"quote\"";
    return r;
}

std::vector<std::uint8_t> toy_png(ClassLabel c, std::size_t i) { return encode_png(toy::generate(c, 5, i)); }

std::shared_ptr<const OctNet> shared_net(std::uint64_t seed = 11) {
    return std::make_shared<const OctNet>(OctNet::build(seed));
}

ServiceConfig config_in(const fs::path& dir) {
    ServiceConfig c;
    c.storage_dir = dir;
    c.max_upload_bytes = 1 << 20;
    return c;
}

}  // namespace

TEST(Encoding, Sha256KnownVector) {
    const std::string abc = "abc";
    EXPECT_EQ(sha256_hex(abc.data(), abc.size()),
              "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Encoding, Base64RoundTripAllPaddings) {
    for (std::size_t n = 0; n < 8; ++n) {
        std::vector<std::uint8_t> v(n);
        for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<std::uint8_t>(250 - 37 * i);
        EXPECT_EQ(base64_decode(base64_encode(v)), v) << n;
    }
    EXPECT_EQ(base64_encode({'M', 'a'}), "TWE=");
}

TEST(ReviewRecordInvariant, OverrideAndAcceptRules) {
    EXPECT_TRUE(sample_record("x", Decision::override_label).invariant_violation());
    EXPECT_TRUE(sample_record("x", Decision::override_label, ClassLabel::DME).invariant_violation());
    EXPECT_FALSE(sample_record("x", Decision::override_label, ClassLabel::CNV).invariant_violation());
    EXPECT_FALSE(sample_record("x", Decision::accept).invariant_violation());
    EXPECT_TRUE(sample_record("x", Decision::accept, ClassLabel::CNV).invariant_violation());
}

TEST(ReviewLog, PersistsAcrossReopenNewestFirst) {
    ScratchDir d("rlog");
    std::vector<std::string> ids;
    {
        ReviewLog log(d / "r.log");
        for (int i = 0; i < 3; ++i) ids.push_back(log.append(sample_record("img" + std::to_string(i), Decision::accept)).record_id);
    }
    ReviewLog log(d / "r.log");
    const auto recs = log.newest_first();
    ASSERT_EQ(recs.size(), 3u);
    EXPECT_EQ(recs[0].record_id, ids[2]);
    EXPECT_EQ(recs[2].record_id, ids[0]);
    EXPECT_EQ(recs[0].note, "tab\tand \"quote\"");
    EXPECT_EQ(std::set<std::string>(ids.begin(), ids.end()).size(), 3u);
    EXPECT_EQ(log.skipped_lines(), 0u);
}

TEST(ReviewLog, AppendKeepsBytePrefix) {
    ScratchDir d("rlog");
    ReviewLog log(d / "r.log");
    log.append(sample_record("a", Decision::accept));
    const auto before = slurp(d / "r.log");
    log.append(sample_record("b", Decision::override_label, ClassLabel::NORMAL));
    const auto after = slurp(d / "r.log");
    ASSERT_GT(after.size(), before.size());
    EXPECT_EQ(after.substr(0, before.size()), before);
}

TEST(ReviewLog, RejectsInvariantViolationWithoutWriting) {
    ScratchDir d("rlog");
    ReviewLog log(d / "r.log");
    EXPECT_THROW(log.append(sample_record("a", Decision::override_label)), std::invalid_argument);
    EXPECT_EQ(log.size(), 0u);
    EXPECT_EQ(fs::file_size(d / "r.log"), 0u);
}

TEST(ReviewLog, TornTailAndCorruptLinesAreSkipped) {
    ScratchDir d("rlog");
    {
        ReviewLog log(d / "r.log");
        log.append(sample_record("a", Decision::accept));
        log.append(sample_record("b", Decision::accept));
    }
    auto text = slurp(d / "r.log");
    // Flip one character inside the second record's JSON: checksum mismatch.
    const auto second = text.find('\n') + 5;
    text[second] = text[second] == 'x' ? 'y' : 'x';
    // Simulate a crash mid-write of a third record.
    text += ReviewLog::encode_line(to_json(sample_record("c", Decision::accept))).substr(0, 40);
    {
        std::ofstream out(d / "r.log", std::ios::binary | std::ios::trunc);
        out << text;
    }
    {
        ReviewLog log(d / "r.log");
        EXPECT_EQ(log.size(), 1u);
        EXPECT_EQ(log.skipped_lines(), 2u);
        log.append(sample_record("d", Decision::accept));
    }
    ReviewLog log(d / "r.log");
    const auto recs = log.newest_first();
    ASSERT_EQ(recs.size(), 2u);
    EXPECT_EQ(recs[0].image_id, "d");
    EXPECT_EQ(recs[1].image_id, "a");
    EXPECT_EQ(log.skipped_lines(), 2u);
}

TEST(ImageStore, ContentAddressedAndIdempotent) {
    ScratchDir d("store");
    ImageStore store(d.path());
    const std::vector<std::uint8_t> bytes{1, 2, 3, 4, 5};
    const auto id = store.put(bytes);
    EXPECT_EQ(id, sha256_hex(bytes.data(), bytes.size()));
    EXPECT_EQ(store.put(bytes), id);
    EXPECT_EQ(*store.get(id), bytes);
    EXPECT_FALSE(store.contains("../etc/passwd"));
    EXPECT_FALSE(store.contains(std::string(64, 'g')));
    std::size_t files = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(d.path())) ++files;
    EXPECT_EQ(files, 1u);
}

TEST(ServiceConfig, LoadsJsonAndResolvesRelativePaths) {
    ScratchDir d("cfg");
    {
        std::ofstream out(d / "c.json");
        out << R"({"weights": "w.bin", "port": 0, "max_samples": 500, "storage_dir": "/abs/store"})";
    }
    const auto c = load_service_config(d / "c.json");
    EXPECT_EQ(c.weights, d / "w.bin");
    EXPECT_EQ(c.port, 0);
    EXPECT_EQ(c.max_samples, 500u);
    EXPECT_EQ(c.max_features, 20u);
    EXPECT_EQ(c.storage_dir, fs::path("/abs/store"));
    {
        std::ofstream out(d / "bad.json");
        out << R"({"port": "eighty"})";
    }
    EXPECT_THROW(load_service_config(d / "bad.json"), ParameterError);
}

TEST(ServiceApi, NoModelAnswers503AndOversize413) {
    ScratchDir d("svc");
    ReviewService svc(config_in(d.path()), nullptr);
    EXPECT_EQ(svc.predict(toy_png(ClassLabel::CNV, 0)).status, 503);
    EXPECT_EQ(svc.predict(std::vector<std::uint8_t>((1 << 20) + 1, 0)).status, 413);
    EXPECT_EQ(svc.health().body["model_loaded"], false);
}

TEST(ServiceApi, PredictContract) {
    ScratchDir d("svc");
    ReviewService svc(config_in(d.path()), shared_net());
    EXPECT_EQ(svc.predict({'n', 'o', 'p', 'e'}).status, 415);

    const auto black = encode_png(Image8(224, 224, 1, 0));
    const auto r1 = svc.predict(black);
    ASSERT_EQ(r1.status, 200);
    const auto probs = r1.body["probs"].get<std::vector<double>>();
    ASSERT_EQ(probs.size(), 4u);
    double sum = 0.0;
    for (double p : probs) {
        EXPECT_GT(p, 0.0);
        EXPECT_LT(p, 1.0);
        sum += p;
    }
    EXPECT_GT(sum, 0.0);
    EXPECT_LT(sum, 4.0);
    const auto best = std::max_element(probs.begin(), probs.end()) - probs.begin();
    EXPECT_EQ(r1.body["label"], std::string(class_name(static_cast<std::size_t>(best))));
    const auto r2 = svc.predict(black);
    EXPECT_EQ(r2.body["image_id"], r1.body["image_id"]);
    EXPECT_EQ(r2.body["probs"], r1.body["probs"]);
    EXPECT_EQ(svc.health().body["predict_latency_ms"]["count"], 2);
}

TEST(ServiceApi, ExplainErrorsAndBounds) {
    ScratchDir d("svc");
    ReviewService svc(config_in(d.path()), shared_net());
    const auto id = svc.predict(toy_png(ClassLabel::DME, 1)).body["image_id"].get<std::string>();
    EXPECT_EQ(svc.explain({{"image_id", std::string(64, 'a')}}).status, 404);
    EXPECT_EQ(svc.explain({{"image_id", "not-an-id"}}).status, 404);
    const auto bad = [&](nlohmann::json params) {
        return svc.explain({{"image_id", id}, {"method", "lime"}, {"params", params}}).status;
    };
    EXPECT_EQ(bad({{"samples", 2001}}), 422);
    EXPECT_EQ(bad({{"samples", 0}}), 422);
    EXPECT_EQ(bad({{"features", 21}}), 422);
    EXPECT_EQ(bad({{"features", 0}}), 422);
    EXPECT_EQ(bad({{"features", "five"}}), 422);
    EXPECT_EQ(bad({{"top_labels", 9}}), 422);
    EXPECT_EQ(bad({{"segments", 1}}), 422);
    EXPECT_EQ(bad({{"seed", -1}}), 422);
    EXPECT_EQ(bad({{"segmentation", "watershed"}}), 422);
    EXPECT_EQ(svc.explain({{"image_id", id}, {"method", "shap"}}).status, 422);
}

TEST(ServiceApi, FeatureSelectionsNestAndGradcamIgnoresLimeParams) {
    ScratchDir d("svc");
    ReviewService svc(config_in(d.path()), shared_net());
    const auto id = svc.predict(toy_png(ClassLabel::DRUSEN, 2)).body["image_id"].get<std::string>();
    const auto lime = [&](int k) {
        return svc.explain({{"image_id", id},
                            {"method", "lime"},
                            {"params", {{"samples", 40}, {"features", k}, {"features_wide", k}, {"seed", 3}}}});
    };
    const auto r5 = lime(5), r10 = lime(10);
    ASSERT_EQ(r5.status, 200);
    ASSERT_EQ(r10.status, 200);
    const auto s5 = r5.body["explanation"]["lime"]["pos_neg_segments"].get<std::vector<int>>();
    const auto s10 = r10.body["explanation"]["lime"]["pos_neg_segments"].get<std::vector<int>>();
    ASSERT_EQ(s5.size(), 5u);
    ASSERT_EQ(s10.size(), 10u);
    EXPECT_TRUE(std::equal(s5.begin(), s5.end(), s10.begin()));
    EXPECT_EQ(r5.body["overlays"]["original"], r10.body["overlays"]["original"]);

    const auto g1 = svc.explain({{"image_id", id}, {"method", "gradcam"}, {"params", {{"samples", 5}}}});
    const auto g2 =
        svc.explain({{"image_id", id}, {"method", "gradcam"}, {"params", {{"samples", 900}, {"features", 17}}}});
    ASSERT_EQ(g1.status, 200);
    EXPECT_EQ(g1.body["overlays"]["gradcam"], g2.body["overlays"]["gradcam"]);
    EXPECT_FALSE(g1.body["params"].contains("samples"));
}

TEST(ServiceApi, ReviewStatusesAndOrdering) {
    ScratchDir d("svc");
    ReviewService svc(config_in(d.path()), shared_net());
    const auto pr = svc.predict(toy_png(ClassLabel::NORMAL, 3)).body;
    const auto id = pr["image_id"].get<std::string>();
    const auto predicted = pr["label"].get<std::string>();
    std::string other;
    for (auto n : kClassNames)
        if (n != predicted) other = std::string(n);

    EXPECT_EQ(svc.post_review({{"image_id", std::string(64, 'b')}, {"decision", "accept"}}).status, 404);
    EXPECT_EQ(svc.post_review({{"image_id", id}, {"decision", "maybe"}}).status, 400);
    EXPECT_EQ(svc.post_review({{"image_id", id}, {"decision", "override"}}).status, 409);
    EXPECT_EQ(svc.post_review({{"image_id", id}, {"decision", "override"}, {"corrected_label", predicted}}).status,
              409);
    EXPECT_EQ(svc.post_review({{"image_id", id}, {"decision", "override"}, {"corrected_label", "GLAUCOMA"}}).status,
              400);
    EXPECT_EQ(svc.review_log().size(), 0u);

    const auto a = svc.post_review({{"image_id", id}, {"decision", "accept"}, {"note", "fine"}});
    ASSERT_EQ(a.status, 201);
    EXPECT_FALSE(a.body.contains("corrected_label"));
    EXPECT_TRUE(a.body["explanation"].is_null());

    svc.explain({{"image_id", id}, {"method", "gradcam"}});
    const auto o = svc.post_review({{"image_id", id}, {"decision", "override"}, {"corrected_label", other}});
    ASSERT_EQ(o.status, 201);
    EXPECT_EQ(o.body["corrected_label"], other);
    EXPECT_EQ(o.body["explanation"]["method"], "gradcam");
    EXPECT_EQ(o.body["predicted"], predicted);

    const auto list = svc.list_reviews().body["records"];
    ASSERT_EQ(list.size(), 2u);
    EXPECT_EQ(list[0]["record_id"], o.body["record_id"]);
    EXPECT_EQ(list[1]["record_id"], a.body["record_id"]);
}

TEST(ServiceApi, RestartKeepsRecordsAndRecomputesPredictions) {
    ScratchDir d("svc");
    std::string id, rec;
    {
        ReviewService svc(config_in(d.path()), shared_net());
        id = svc.predict(toy_png(ClassLabel::CNV, 4)).body["image_id"];
        rec = svc.post_review({{"image_id", id}, {"decision", "accept"}}).body["record_id"];
    }
    ReviewService svc(config_in(d.path()), shared_net());
    const auto list = svc.list_reviews().body["records"];
    ASSERT_EQ(list.size(), 1u);
    EXPECT_EQ(list[0]["record_id"], rec);
    // The image was predicted before the restart; reviewing it still works.
    EXPECT_EQ(svc.post_review({{"image_id", id}, {"decision", "accept"}}).status, 201);
}

TEST(HttpServer, RoutesStatusesAndFallbackIndex) {
    ScratchDir d("http");
    auto cfg = config_in(d.path());
    cfg.max_upload_bytes = 200000;
    ReviewService svc(cfg, shared_net());
    httplib::Server server;
    install_routes(server, svc);
    const int port = server.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port, 0);
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();
    httplib::Client cli("127.0.0.1", port);

    const auto png = toy_png(ClassLabel::CNV, 9);
    auto r = cli.Post("/api/predict", std::string(png.begin(), png.end()), "image/png");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 200);
    const auto id = nlohmann::json::parse(r->body)["image_id"].get<std::string>();

    httplib::MultipartFormDataItems items{{"image", std::string(png.begin(), png.end()), "x.png", "image/png"}};
    r = cli.Post("/api/predict", items);
    ASSERT_TRUE(r);
    EXPECT_EQ(nlohmann::json::parse(r->body)["image_id"], id);

    r = cli.Post("/api/predict", std::string(300000, 'x'), "application/octet-stream");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 413);
    r = cli.Post("/api/predict", "garbage", "image/png");
    EXPECT_EQ(r->status, 415);
    r = cli.Post("/api/explain", "{not json", "application/json");
    EXPECT_EQ(r->status, 400);
    r = cli.Post("/api/reviews", nlohmann::json{{"image_id", id}, {"decision", "override"}}.dump(),
                 "application/json");
    EXPECT_EQ(r->status, 409);
    r = cli.Get("/api/reviews");
    EXPECT_EQ(r->status, 200);
    r = cli.Get("/api/health");
    EXPECT_EQ(nlohmann::json::parse(r->body)["status"], "ok");
    r = cli.Get("/");
    EXPECT_EQ(r->status, 200);
    EXPECT_NE(r->body.find("<html"), std::string::npos);

    server.stop();
    th.join();
}

TEST(HttpServer, ServesStaticBundleAtRoot) {
    ScratchDir d("http");
    fs::create_directories(d / "ui");
    {
        std::ofstream out(d / "ui" / "index.html");
        out << "<html>bundle</html>";
    }
    auto cfg = config_in(d / "store");
    cfg.static_dir = d / "ui";
    ReviewService svc(cfg, nullptr);
    httplib::Server server;
    install_routes(server, svc);
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();
    httplib::Client cli("127.0.0.1", port);
    auto r = cli.Get("/");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->body, "<html>bundle</html>");
    r = cli.Get("/api/health");
    EXPECT_EQ(nlohmann::json::parse(r->body)["model_loaded"], false);
    server.stop();
    th.join();
}

TEST(Cli, ExitCodesPerFailureClass) {
    ScratchDir d("cli");
    const std::string cli = OCTX_CLI_PATH;
    save_weights(OctNet::build(1), d / "w.bin");
    write_file_bytes(d / "bad.png", {'n', 'o'});
    EXPECT_EQ(octx::testing::run_process({cli, "explain", "--weights", (d / "w.bin").string(), "--image",
                                          (d / "bad.png").string(), "--out", (d / "o").string()}),
              2);
    EXPECT_EQ(octx::testing::run_process({cli, "explain", "--weights", (d / "missing.bin").string(), "--image",
                                          (d / "bad.png").string()}),
              4);
    EXPECT_EQ(octx::testing::run_process({cli, "train", "--data", (d / "nodata").string(), "--out",
                                          (d / "x.bin").string()}),
              2);
}

TEST(Cli, ExplainFeaturesOneHighlightsOneSegmentAndRepeatsByteIdentical) {
    ScratchDir d("cli");
    const std::string cli = OCTX_CLI_PATH;
    save_weights(OctNet::build(2), d / "w.bin");
    write_file_bytes(d / "img.png", toy_png(ClassLabel::DME, 7));
    const auto run = [&](const std::string& out) {
        return octx::testing::run_process({cli, "explain", "--weights", (d / "w.bin").string(), "--image",
                                           (d / "img.png").string(), "--method", "lime", "--samples", "30",
                                           "--features", "1", "--features-wide", "1", "--seed", "9", "--out",
                                           (d / out).string()});
    };
    ASSERT_EQ(run("a"), 0);
    ASSERT_EQ(run("b"), 0);
    for (const char* f : {"A_original.png", "B_segments.png", "C_positive_k1.png", "D_posneg_k1.png"})
        EXPECT_EQ(slurp(d / "a" / f), slurp(d / "b" / f)) << f;
    const auto doc = nlohmann::json::parse(slurp(d / "a" / "explanation.json"));
    EXPECT_EQ(doc["explanation"]["lime"]["pos_neg_segments"].size(), 1u);
    EXPECT_LE(doc["explanation"]["lime"]["positive_segments"].size(), 1u);
}
