#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>

namespace octx {

enum class LogLevel { info, warning, error };

using LogSink = std::function<void(LogLevel, const std::string&)>;

namespace detail {

inline std::mutex& log_mutex() {
    static std::mutex m;
    return m;
}

inline LogSink& log_sink() {
    static LogSink sink = [](LogLevel lvl, const std::string& msg) {
        static constexpr const char* tags[] = {"info", "warning", "error"};
        std::cerr << "[octx " << tags[static_cast<int>(lvl)] << "] " << msg << '\n';
    };
    return sink;
}

}  // namespace detail

// Replaces the process-wide sink; returns the previous one.
inline LogSink set_log_sink(LogSink sink) {
    std::lock_guard lk(detail::log_mutex());
    std::swap(detail::log_sink(), sink);
    return sink;
}

inline void log(LogLevel lvl, const std::string& msg) {
    std::lock_guard lk(detail::log_mutex());
    if (detail::log_sink()) detail::log_sink()(lvl, msg);
}

inline void log_info(const std::string& msg) { log(LogLevel::info, msg); }
inline void log_warning(const std::string& msg) { log(LogLevel::warning, msg); }

}  // namespace octx
