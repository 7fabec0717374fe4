#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <array>
#include <cerrno>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "json.hpp"
#include "octx/classes.hpp"
#include "octx/log.hpp"
#include "octx/weights_io.hpp"

namespace octx {

inline std::string to_hex(const unsigned char* p, std::size_t n) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s(2 * n, '0');
    for (std::size_t i = 0; i < n; ++i) {
        s[2 * i] = digits[p[i] >> 4];
        s[2 * i + 1] = digits[p[i] & 15];
    }
    return s;
}

inline std::string sha256_hex(const void* data, std::size_t n) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!EVP_Digest(data, n, md, &len, EVP_sha256(), nullptr)) throw std::runtime_error("sha256 failed");
    return to_hex(md, len);
}

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                  static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& text) {
    if (text.size() % 4) throw std::invalid_argument("base64 length is not a multiple of 4");
    std::vector<std::uint8_t> out(3 * text.size() / 4);
    const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                  static_cast<int>(text.size()));
    if (n < 0) throw std::invalid_argument("invalid base64");
    std::size_t pad = 0;
    if (!text.empty() && text.back() == '=') ++pad;
    if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

// ISO-8601 UTC with milliseconds.
inline std::string utc_timestamp(std::chrono::system_clock::time_point t = std::chrono::system_clock::now()) {
    const auto secs = std::chrono::system_clock::to_time_t(t);
    const auto ms =
        std::chrono::duration_cast<std::chrono::milliseconds>(t.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&secs, &tm);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1,
                  tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
    return buf;
}

enum class Decision { accept, override_label };

inline const char* decision_name(Decision d) { return d == Decision::accept ? "accept" : "override"; }

inline std::optional<Decision> parse_decision(const std::string& s) {
    if (s == "accept") return Decision::accept;
    if (s == "override") return Decision::override_label;
    return std::nullopt;
}

struct ReviewRecord {
    std::string record_id;
    std::string image_id;    // SHA-256 of the uploaded bytes
    std::string image_path;  // where the store keeps them
    ClassLabel predicted = ClassLabel::CNV;
    std::array<double, kNumClasses> probs{};
    nlohmann::json explanation;  // {method, samples, features, seed} or null
    Decision decision = Decision::accept;
    std::optional<ClassLabel> corrected;
    std::string note;
    std::string timestamp;

    // override requires a corrected label different from the prediction;
    // accept carries none.
    std::optional<std::string> invariant_violation() const {
        if (decision == Decision::override_label) {
            if (!corrected) return "override requires corrected_label";
            if (*corrected == predicted) return "corrected_label equals the predicted label";
        } else if (corrected) {
            return "accept must not carry corrected_label";
        }
        return std::nullopt;
    }
};

inline nlohmann::json probs_json(const std::array<double, kNumClasses>& p) {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t c = 0; c < kNumClasses; ++c) j[std::string(kClassNames[c])] = p[c];
    return j;
}

inline nlohmann::json to_json(const ReviewRecord& r) {
    nlohmann::json j{{"record_id", r.record_id},
                     {"image_id", r.image_id},
                     {"image_path", r.image_path},
                     {"predicted", class_name(r.predicted)},
                     {"probabilities", probs_json(r.probs)},
                     {"explanation", r.explanation},
                     {"decision", decision_name(r.decision)},
                     {"note", r.note},
                     {"timestamp", r.timestamp}};
    if (r.corrected) j["corrected_label"] = class_name(*r.corrected);
    return j;
}

inline ClassLabel require_class(const std::string& s) {
    const auto c = parse_class(s);
    if (!c) throw std::invalid_argument("unknown class label '" + s + "'");
    return *c;
}

inline ReviewRecord record_from_json(const nlohmann::json& j) {
    ReviewRecord r;
    r.record_id = j.at("record_id").get<std::string>();
    r.image_id = j.at("image_id").get<std::string>();
    r.image_path = j.at("image_path").get<std::string>();
    r.predicted = require_class(j.at("predicted").get<std::string>());
    for (std::size_t c = 0; c < kNumClasses; ++c)
        r.probs[c] = j.at("probabilities").at(std::string(kClassNames[c])).get<double>();
    r.explanation = j.value("explanation", nlohmann::json());
    const auto d = parse_decision(j.at("decision").get<std::string>());
    if (!d) throw std::invalid_argument("bad decision");
    r.decision = *d;
    if (j.contains("corrected_label")) r.corrected = require_class(j.at("corrected_label").get<std::string>());
    r.note = j.value("note", "");
    r.timestamp = j.at("timestamp").get<std::string>();
    return r;
}

// Append-only audit log: one `<json>\t<crc32 hex>` line per record, each
// append followed by fsync. Lines that are torn or fail their checksum are
// skipped (and counted) on load; they are never rewritten.
class ReviewLog {
public:
    explicit ReviewLog(std::filesystem::path path) : path_(std::move(path)) {
        if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
        load();
        fd_ = ::open(path_.c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
        if (fd_ < 0) throw IoError("cannot open review log " + path_.string() + ": " + std::strerror(errno));
        // Terminate a torn tail so the next record starts on its own line.
        if (needs_newline_) write_all("\n");
    }
    ReviewLog(const ReviewLog&) = delete;
    ReviewLog& operator=(const ReviewLog&) = delete;
    ~ReviewLog() {
        if (fd_ >= 0) ::close(fd_);
    }

    static std::string encode_line(const nlohmann::json& j) {
        const std::string body = j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
        char crc[16];
        std::snprintf(crc, sizeof crc, "%08x", crc32_of(reinterpret_cast<const std::uint8_t*>(body.data()), body.size()));
        return body + '\t' + crc + '\n';
    }

    // Assigns record_id and timestamp when empty, then appends durably.
    ReviewRecord append(ReviewRecord r) {
        std::lock_guard lk(mu_);
        if (r.timestamp.empty()) r.timestamp = utc_timestamp();
        if (r.record_id.empty()) {
            const auto seed = std::to_string(records_.size()) + '|' + r.timestamp + '|' + r.image_id + '|' +
                              std::to_string(std::chrono::steady_clock::now().time_since_epoch().count());
            r.record_id = sha256_hex(seed.data(), seed.size()).substr(0, 16);
        }
        if (const auto v = r.invariant_violation()) throw std::invalid_argument(*v);
        write_all(encode_line(to_json(r)));
        records_.push_back(r);
        return r;
    }

    std::vector<ReviewRecord> newest_first() const {
        std::lock_guard lk(mu_);
        return {records_.rbegin(), records_.rend()};
    }

    std::size_t size() const {
        std::lock_guard lk(mu_);
        return records_.size();
    }
    std::size_t skipped_lines() const { return skipped_; }
    const std::filesystem::path& path() const { return path_; }

private:
    void load() {
        std::ifstream in(path_, std::ios::binary);
        if (!in) return;
        std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        needs_newline_ = !all.empty() && all.back() != '\n';
        std::size_t pos = 0, lineno = 0;
        while (pos < all.size()) {
            const auto nl = all.find('\n', pos);
            const bool complete = nl != std::string::npos;
            const std::string line = all.substr(pos, complete ? nl - pos : std::string::npos);
            pos = complete ? nl + 1 : all.size();
            ++lineno;
            if (line.empty()) continue;
            if (!complete || !parse_line(line)) {
                ++skipped_;
                log_warning("review log " + path_.string() + ": skipping damaged line " + std::to_string(lineno));
            }
        }
    }

    bool parse_line(const std::string& line) {
        const auto tab = line.rfind('\t');
        if (tab == std::string::npos || line.size() - tab != 9) return false;
        const std::string body = line.substr(0, tab);
        char crc[16];
        std::snprintf(crc, sizeof crc, "%08x", crc32_of(reinterpret_cast<const std::uint8_t*>(body.data()), body.size()));
        if (line.compare(tab + 1, 8, crc) != 0) return false;
        try {
            records_.push_back(record_from_json(nlohmann::json::parse(body)));
        } catch (const std::exception&) {
            return false;
        }
        return true;
    }

    void write_all(const std::string& s) {
        std::size_t off = 0;
        while (off < s.size()) {
            const auto n = ::write(fd_, s.data() + off, s.size() - off);
            if (n < 0) {
                if (errno == EINTR) continue;
                throw IoError("review log write failed: " + std::string(std::strerror(errno)));
            }
            off += static_cast<std::size_t>(n);
        }
        if (::fsync(fd_) != 0)
            throw IoError("review log fsync failed: " + std::string(std::strerror(errno)));
    }

    std::filesystem::path path_;
    int fd_ = -1;
    bool needs_newline_ = false;
    std::size_t skipped_ = 0;
    mutable std::mutex mu_;
    std::vector<ReviewRecord> records_;
};

}  // namespace octx
