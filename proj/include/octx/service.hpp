#pragma once

// Review service core, independent of the HTTP transport: content-addressed
// image store, predict / explain / review handlers returning (status, JSON),
// and the service configuration.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "octx/explain_panels.hpp"
#include "octx/image_io.hpp"
#include "octx/review_log.hpp"
#include "octx/weights_io.hpp"

namespace octx {

struct ServiceConfig {
    std::filesystem::path weights;
    std::string host = "127.0.0.1";
    int port = 8080;
    std::filesystem::path storage_dir = "octx-data";
    std::size_t max_upload_bytes = 20u << 20;
    std::filesystem::path static_dir;  // built UI bundle; empty -> fallback page
    // Explanation parameter bounds.
    std::size_t max_samples = 2000;
    std::size_t max_features = 20;
    std::size_t max_segments = 256;
    unsigned threads = 1;

    void validate() const {
        if (port < 0 || port > 65535) throw ParameterError("port out of range");
        if (max_upload_bytes == 0) throw ParameterError("max_upload_bytes must be positive");
        if (max_samples < 1 || max_features < 1) throw ParameterError("explanation bounds must be >= 1");
        if (max_segments < 2) throw ParameterError("max_segments must be >= 2");
    }
};

// Keys absent from the file keep their defaults; relative paths resolve
// against the file's directory.
inline ServiceConfig load_service_config(const std::filesystem::path& path, ServiceConfig cfg = {}) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ParameterError("config " + path.string() + ": " + e.what());
    }
    const auto base = path.parent_path();
    const auto resolve = [&](const std::string& p) {
        const std::filesystem::path fp(p);
        return fp.is_relative() && !p.empty() ? base / fp : fp;
    };
    try {
        if (j.contains("weights")) cfg.weights = resolve(j["weights"].get<std::string>());
        if (j.contains("host")) cfg.host = j["host"].get<std::string>();
        if (j.contains("port")) cfg.port = j["port"].get<int>();
        if (j.contains("storage_dir")) cfg.storage_dir = resolve(j["storage_dir"].get<std::string>());
        if (j.contains("max_upload_bytes")) cfg.max_upload_bytes = j["max_upload_bytes"].get<std::size_t>();
        if (j.contains("static_dir")) cfg.static_dir = resolve(j["static_dir"].get<std::string>());
        if (j.contains("max_samples")) cfg.max_samples = j["max_samples"].get<std::size_t>();
        if (j.contains("max_features")) cfg.max_features = j["max_features"].get<std::size_t>();
        if (j.contains("max_segments")) cfg.max_segments = j["max_segments"].get<std::size_t>();
        if (j.contains("threads")) cfg.threads = j["threads"].get<unsigned>();
    } catch (const nlohmann::json::exception& e) {
        throw ParameterError("config " + path.string() + ": " + e.what());
    }
    cfg.validate();
    return cfg;
}

inline bool is_image_id(const std::string& s) {
    return s.size() == 64 && std::all_of(s.begin(), s.end(), [](char c) {
               return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f');
           });
}

// Uploaded bytes stored verbatim under their SHA-256. Writes go through a
// temp file and rename, so a store entry is either absent or complete, and
// re-storing the same bytes is a no-op.
class ImageStore {
public:
    explicit ImageStore(std::filesystem::path dir) : dir_(std::move(dir)) {
        std::filesystem::create_directories(dir_);
    }

    std::filesystem::path path_for(const std::string& id) const { return dir_ / (id + ".img"); }

    std::string put(const std::vector<std::uint8_t>& bytes) {
        const auto id = sha256_hex(bytes.data(), bytes.size());
        const auto dst = path_for(id);
        if (std::filesystem::exists(dst)) return id;
        std::lock_guard lk(mu_);
        const auto tmp = dir_ / (id + ".tmp" + std::to_string(++seq_));
        try {
            write_file_bytes(tmp, bytes);
            std::filesystem::rename(tmp, dst);
        } catch (const std::exception& e) {
            std::error_code ec;
            std::filesystem::remove(tmp, ec);
            throw IoError("image store: " + std::string(e.what()));
        }
        return id;
    }

    bool contains(const std::string& id) const {
        return is_image_id(id) && std::filesystem::exists(path_for(id));
    }

    std::optional<std::vector<std::uint8_t>> get(const std::string& id) const {
        if (!contains(id)) return std::nullopt;
        return read_file_bytes(path_for(id));
    }

    const std::filesystem::path& dir() const { return dir_; }

private:
    std::filesystem::path dir_;
    std::mutex mu_;
    std::uint64_t seq_ = 0;
};

struct ApiResult {
    int status = 200;
    nlohmann::json body;
};

inline ApiResult api_error(int status, const std::string& msg) { return {status, {{"error", msg}}}; }

// Explanation request parameters as accepted over the wire; the CLI builds
// the same struct from its flags so both paths share one code path.
struct ExplainRequest {
    std::string method = "all";  // lime | gradcam | all
    LimeParams lime;
    std::size_t features_wide = kDefaultFeaturesWide;
    std::optional<std::size_t> gradcam_class;
};

// Both the LIME and Grad-CAM artifacts for one request.
inline ExplainArtifacts run_explain(const OctNet& net, const Tensor& image, const ExplainRequest& req) {
    ExplainArtifacts out;
    if (req.method == "lime" || req.method == "all") {
        auto a = lime_panels(net, image, req.lime, req.features_wide);
        out.panels = std::move(a.panels);
        out.data["lime"] = std::move(a.data);
    }
    if (req.method == "gradcam" || req.method == "all") {
        auto a = gradcam_panels(net, image, req.gradcam_class);
        if (out.panels.empty()) out.panels.push_back({"original", "A_original.png", encode_png(to_image8(image))});
        for (auto& p : a.panels) out.panels.push_back(std::move(p));
        out.data["gradcam"] = std::move(a.data);
        out.gradcam_raw = std::move(a.gradcam_raw);
    }
    return out;
}

// Parameters recorded alongside a review.
inline nlohmann::json explain_params_json(const ExplainRequest& r) {
    nlohmann::json j{{"method", r.method}};
    if (r.method != "gradcam") {
        j["samples"] = r.lime.num_samples;
        j["top_labels"] = std::min(r.lime.top_labels, kNumClasses);
        j["features"] = r.lime.num_features;
        j["features_wide"] = r.features_wide;
        j["segments"] = r.lime.segments;
        j["segmentation"] = segment_mode_name(r.lime.segmentation);
        j["seed"] = r.lime.seed;
    }
    if (r.gradcam_class) j["class"] = class_name(*r.gradcam_class);
    return j;
}

class ReviewService {
public:
    // `net` may be null: the service then answers model endpoints with 503.
    ReviewService(ServiceConfig cfg, std::shared_ptr<const OctNet> net)
        : cfg_(std::move(cfg)),
          net_(std::move(net)),
          store_(cfg_.storage_dir / "images"),
          log_(cfg_.storage_dir / "reviews.log") {
        cfg_.validate();
    }

    const ServiceConfig& config() const { return cfg_; }
    bool model_loaded() const { return net_ != nullptr; }
    const ImageStore& store() const { return store_; }
    const ReviewLog& review_log() const { return log_; }

    ApiResult predict(const std::vector<std::uint8_t>& bytes) {
        if (bytes.size() > cfg_.max_upload_bytes)
            return api_error(413, "upload of " + std::to_string(bytes.size()) + " bytes exceeds limit of " +
                                      std::to_string(cfg_.max_upload_bytes));
        if (!net_) return api_error(503, "model not loaded");
        Tensor image;
        try {
            image = preprocess(decode_image(bytes, "upload"));
        } catch (const std::exception& e) {
            return api_error(415, std::string("undecodable image: ") + e.what());
        }
        const auto t0 = std::chrono::steady_clock::now();
        const auto p = octx::predict(*net_, image);
        record_latency(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        const auto id = store_.put(bytes);
        {
            std::lock_guard lk(mu_);
            predictions_[id] = p;
        }
        return {200,
                {{"image_id", id},
                 {"label", class_name(p.label)},
                 {"probs", std::vector<double>(p.probs.begin(), p.probs.end())},
                 {"probabilities", probs_json(p.probs)}}};
    }

    // Parses and bounds-checks explain parameters; a string error maps to 422.
    std::variant<ExplainRequest, std::string> parse_explain(const nlohmann::json& body) const {
        ExplainRequest r;
        r.lime.threads = cfg_.threads;
        r.method = body.value("method", std::string("all"));
        if (r.method != "lime" && r.method != "gradcam" && r.method != "all")
            return "method must be lime, gradcam or all";
        const nlohmann::json params = body.value("params", nlohmann::json::object());
        if (!params.is_object()) return "params must be an object";
        const auto bounded = [&](const char* key, std::size_t& dst, std::size_t lo, std::size_t hi) -> std::string {
            if (!params.contains(key)) return {};
            const auto& v = params[key];
            if (!v.is_number_integer()) return std::string(key) + " must be an integer";
            const auto x = v.get<long long>();
            if (x < static_cast<long long>(lo) || x > static_cast<long long>(hi))
                return std::string(key) + " must be in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]";
            dst = static_cast<std::size_t>(x);
            return {};
        };
        for (const auto& e : {bounded("samples", r.lime.num_samples, 1, cfg_.max_samples),
                              bounded("top_labels", r.lime.top_labels, 1, kNumClasses),
                              bounded("features", r.lime.num_features, 1, cfg_.max_features),
                              bounded("features_wide", r.features_wide, 1, cfg_.max_features),
                              bounded("segments", r.lime.segments, 2, cfg_.max_segments)})
            if (!e.empty()) return e;
        if (params.contains("seed")) {
            const auto& v = params["seed"];
            if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
                return "seed must be a non-negative integer";
            r.lime.seed = params["seed"].get<std::uint64_t>();
        }
        if (params.contains("segmentation")) {
            const auto s = params["segmentation"].is_string() ? params["segmentation"].get<std::string>() : "";
            if (s == "grid") r.lime.segmentation = SegmentMode::grid;
            else if (s == "slic") r.lime.segmentation = SegmentMode::slic;
            else return "segmentation must be grid or slic";
        }
        if (params.contains("class")) {
            const auto c = params["class"].is_string() ? parse_class(params["class"].get<std::string>()) : std::nullopt;
            if (!c) return "class must be one of CNV, DME, DRUSEN, NORMAL";
            r.gradcam_class = index_of(*c);
        }
        return r;
    }

    ApiResult explain(const nlohmann::json& body) {
        if (!body.is_object()) return api_error(400, "body must be a JSON object");
        const auto id = body.value("image_id", std::string());
        if (!net_) return api_error(503, "model not loaded");
        auto bytes = store_.get(id);
        if (!bytes) return api_error(404, "unknown image_id");
        auto parsed = parse_explain(body);
        if (auto* err = std::get_if<std::string>(&parsed)) return api_error(422, *err);
        const auto& req = std::get<ExplainRequest>(parsed);
        const auto image = preprocess(decode_image(*bytes, id));
        const auto art = run_explain(*net_, image, req);
        nlohmann::json overlays = nlohmann::json::object();
        nlohmann::json files = nlohmann::json::object();
        for (const auto& p : art.panels) {
            overlays[p.key] = base64_encode(p.png);
            files[p.key] = p.file;
        }
        {
            std::lock_guard lk(mu_);
            last_explain_[id] = explain_params_json(req);
        }
        return {200,
                {{"image_id", id},
                 {"method", req.method},
                 {"params", explain_params_json(req)},
                 {"overlays", overlays},
                 {"files", files},
                 {"explanation", art.data}}};
    }

    ApiResult post_review(const nlohmann::json& body) {
        if (!body.is_object()) return api_error(400, "body must be a JSON object");
        const auto id = body.value("image_id", std::string());
        if (!store_.contains(id)) return api_error(404, "unknown image_id");
        const auto pred = prediction_for(id);
        if (!pred) return api_error(503, "model not loaded");
        ReviewRecord r;
        r.image_id = id;
        r.image_path = store_.path_for(id).string();
        r.predicted = pred->label;
        r.probs = pred->probs;
        const auto d = body.contains("decision") && body["decision"].is_string()
                           ? parse_decision(body["decision"].get<std::string>())
                           : std::nullopt;
        if (!d) return api_error(400, "decision must be accept or override");
        r.decision = *d;
        if (body.contains("corrected_label") && !body["corrected_label"].is_null()) {
            const auto c = body["corrected_label"].is_string()
                               ? parse_class(body["corrected_label"].get<std::string>())
                               : std::nullopt;
            if (!c) return api_error(400, "corrected_label must be one of CNV, DME, DRUSEN, NORMAL");
            r.corrected = *c;
        }
        if (body.contains("note") && !body["note"].is_string()) return api_error(400, "note must be a string");
        r.note = body.value("note", std::string());
        if (const auto v = r.invariant_violation()) return api_error(409, *v);
        if (body.contains("explanation") && body["explanation"].is_object()) {
            r.explanation = body["explanation"];
        } else {
            std::lock_guard lk(mu_);
            const auto it = last_explain_.find(id);
            r.explanation = it == last_explain_.end() ? nlohmann::json() : it->second;
        }
        return {201, to_json(log_.append(std::move(r)))};
    }

    ApiResult list_reviews() const {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& r : log_.newest_first()) arr.push_back(to_json(r));
        return {200, {{"records", arr}, {"count", arr.size()}}};
    }

    ApiResult health() const {
        std::vector<double> lat;
        {
            std::lock_guard lk(mu_);
            lat = latencies_;
        }
        std::sort(lat.begin(), lat.end());
        const auto pct = [&](double q) -> nlohmann::json {
            if (lat.empty()) return nullptr;
            return lat[std::min(lat.size() - 1, static_cast<std::size_t>(q * (lat.size() - 1) + 0.5))];
        };
        return {200,
                {{"status", net_ ? "ok" : "degraded"},
                 {"model_loaded", net_ != nullptr},
                 {"records", log_.size()},
                 {"skipped_log_lines", log_.skipped_lines()},
                 {"predict_latency_ms", {{"count", lat.size()}, {"p50", pct(0.5)}, {"p95", pct(0.95)}}},
                 {"limits",
                  {{"max_upload_bytes", cfg_.max_upload_bytes},
                   {"max_samples", cfg_.max_samples},
                   {"max_features", cfg_.max_features},
                   {"max_segments", cfg_.max_segments}}}}};
    }

private:
    // Predictions made before a restart are recomputed from the stored bytes
    // (the forward pass is deterministic).
    std::optional<Prediction> prediction_for(const std::string& id) {
        {
            std::lock_guard lk(mu_);
            if (const auto it = predictions_.find(id); it != predictions_.end()) return it->second;
        }
        if (!net_) return std::nullopt;
        const auto p = octx::predict(*net_, preprocess(decode_image(*store_.get(id), id)));
        std::lock_guard lk(mu_);
        predictions_[id] = p;
        return p;
    }

    void record_latency(double ms) {
        std::lock_guard lk(mu_);
        if (latencies_.size() == kLatencyWindow) latencies_.erase(latencies_.begin());
        latencies_.push_back(ms);
    }

    static constexpr std::size_t kLatencyWindow = 1000;

    ServiceConfig cfg_;
    std::shared_ptr<const OctNet> net_;
    ImageStore store_;
    ReviewLog log_;
    mutable std::mutex mu_;
    std::map<std::string, Prediction> predictions_;
    std::map<std::string, nlohmann::json> last_explain_;
    std::vector<double> latencies_;
};

}  // namespace octx
