#pragma once

// HTTP binding of ReviewService. Routes:
//   POST /api/predict   raw image body, or multipart field "image"
//   POST /api/explain   {image_id, method, params}
//   POST /api/reviews   {image_id, decision, corrected_label?, note?}
//   GET  /api/reviews
//   GET  /api/health
//   GET  /              static UI bundle, or a placeholder page without one

#include <filesystem>
#include <string>

#include "httplib.h"
#include "json.hpp"
#include "octx/service.hpp"

namespace octx {

inline constexpr const char* kFallbackIndex = R"(<!doctype html>
<html><head><meta charset="utf-8"><title>octx review</title></head>
<body>
<h1>octx review service</h1>
<p>The review UI bundle is not installed. Set <code>static_dir</code> in the service config to serve it here.</p>
<ul>
<li>POST /api/predict</li>
<li>POST /api/explain</li>
<li>POST /api/reviews, GET /api/reviews</li>
<li>GET /api/health</li>
</ul>
</body></html>
)";

namespace detail {

inline void send(httplib::Response& res, const ApiResult& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
}

// nullopt -> the response already holds a 400.
inline std::optional<nlohmann::json> parse_body(const httplib::Request& req, httplib::Response& res) {
    try {
        return nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception& e) {
        send(res, api_error(400, std::string("malformed JSON: ") + e.what()));
        return std::nullopt;
    }
}

}  // namespace detail

// Registers the routes on `server`. The service must outlive it.
inline void install_routes(httplib::Server& server, ReviewService& svc) {
    using httplib::Request;
    using httplib::Response;
    const auto& cfg = svc.config();
    // Leave headroom for multipart framing; the exact limit is enforced on
    // the image bytes themselves.
    server.set_payload_max_length(cfg.max_upload_bytes + 64 * 1024);

    server.Post("/api/predict", [&svc](const Request& req, Response& res) {
        std::string body = req.body;
        if (req.is_multipart_form_data()) {
            if (!req.has_file("image")) return detail::send(res, api_error(400, "multipart field 'image' missing"));
            body = req.get_file_value("image").content;
        }
        detail::send(res, svc.predict(std::vector<std::uint8_t>(body.begin(), body.end())));
    });
    server.Post("/api/explain", [&svc](const Request& req, Response& res) {
        if (const auto j = detail::parse_body(req, res)) detail::send(res, svc.explain(*j));
    });
    server.Post("/api/reviews", [&svc](const Request& req, Response& res) {
        if (const auto j = detail::parse_body(req, res)) detail::send(res, svc.post_review(*j));
    });
    server.Get("/api/reviews", [&svc](const Request&, Response& res) { detail::send(res, svc.list_reviews()); });
    server.Get("/api/health", [&svc](const Request&, Response& res) { detail::send(res, svc.health()); });

    server.set_exception_handler([](const Request&, Response& res, std::exception_ptr ep) {
        std::string msg = "internal error";
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            msg = e.what();
        } catch (...) {
        }
        log(LogLevel::error, "request failed: " + msg);
        detail::send(res, api_error(500, msg));
    });
    // Oversized bodies are rejected by the transport before reaching a
    // handler; give them the same JSON shape.
    server.set_error_handler([](const Request&, Response& res) {
        if (res.status == 413 && res.body.empty())
            detail::send(res, api_error(413, "upload exceeds the configured limit"));
    });

    if (!cfg.static_dir.empty() && std::filesystem::is_directory(cfg.static_dir)) {
        server.set_mount_point("/", cfg.static_dir.string());
    } else {
        if (!cfg.static_dir.empty()) log_warning("static_dir " + cfg.static_dir.string() + " not found");
        server.Get("/", [](const Request&, Response& res) { res.set_content(kFallbackIndex, "text/html"); });
    }
}

}  // namespace octx
