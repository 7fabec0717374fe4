#pragma once

#include <cstdio>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "octx/classes.hpp"
#include "octx/tensor.hpp"

namespace octx {

struct ClassMetrics {
    double precision = 0.0;
    double sensitivity = 0.0;  // recall
    double f1 = 0.0;
    // Set when the corresponding denominator was zero and 0 was reported.
    bool precision_undefined = false;
    bool sensitivity_undefined = false;
    bool f1_undefined = false;
};

struct Metrics {
    std::size_t num_classes = kNumClasses;
    // confusion[true][predicted]
    std::vector<std::vector<std::size_t>> confusion;
    std::vector<ClassMetrics> per_class;
    double accuracy = 0.0;
    std::size_t total = 0;

    bool any_undefined() const {
        for (const auto& c : per_class)
            if (c.precision_undefined || c.sensitivity_undefined || c.f1_undefined) return true;
        return false;
    }
};

inline Metrics metrics_from_confusion(std::vector<std::vector<std::size_t>> confusion) {
    Metrics m;
    m.num_classes = confusion.size();
    for (const auto& row : confusion)
        if (row.size() != m.num_classes) throw DimensionError("confusion matrix must be square");
    m.confusion = std::move(confusion);
    m.per_class.resize(m.num_classes);
    const std::size_t K = m.num_classes;
    std::size_t trace = 0;
    for (std::size_t i = 0; i < K; ++i) {
        trace += m.confusion[i][i];
        for (std::size_t j = 0; j < K; ++j) m.total += m.confusion[i][j];
    }
    for (std::size_t c = 0; c < K; ++c) {
        const std::size_t tp = m.confusion[c][c];
        std::size_t pred = 0, actual = 0;
        for (std::size_t k = 0; k < K; ++k) {
            pred += m.confusion[k][c];
            actual += m.confusion[c][k];
        }
        auto& cm = m.per_class[c];
        if (pred) cm.precision = static_cast<double>(tp) / static_cast<double>(pred);
        else cm.precision_undefined = true;
        if (actual) cm.sensitivity = static_cast<double>(tp) / static_cast<double>(actual);
        else cm.sensitivity_undefined = true;
        const double s = cm.precision + cm.sensitivity;
        if (s > 0.0) cm.f1 = 2.0 * cm.precision * cm.sensitivity / s;
        else cm.f1_undefined = true;
    }
    m.accuracy = m.total ? static_cast<double>(trace) / static_cast<double>(m.total) : 0.0;
    return m;
}

inline Metrics compute_metrics(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                               std::size_t num_classes = kNumClasses) {
    if (truth.size() != predicted.size())
        throw DimensionError("compute_metrics: " + std::to_string(truth.size()) + " labels vs " +
                             std::to_string(predicted.size()) + " predictions");
    std::vector<std::vector<std::size_t>> cm(num_classes, std::vector<std::size_t>(num_classes, 0));
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] >= num_classes || predicted[i] >= num_classes)
            throw DimensionError("compute_metrics: class index out of range");
        ++cm[truth[i]][predicted[i]];
    }
    return metrics_from_confusion(std::move(cm));
}

namespace detail {

inline std::string metrics_class_name(std::size_t c, std::size_t K) {
    return K == kNumClasses ? std::string(kClassNames[c]) : "class" + std::to_string(c);
}

}  // namespace detail

// Performance table (class, precision, F-1, sensitivity, accuracy %) followed by
// the raw confusion matrix.
inline std::string format_report(const Metrics& m) {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof line, "%-8s %9s %9s %11s %9s\n", "Class", "Precision", "F-1 Score", "Sensitivity",
                  "Accuracy");
    os << line;
    for (std::size_t c = 0; c < m.num_classes; ++c) {
        const auto& cm = m.per_class[c];
        char acc[32] = "";
        if (c == 0) std::snprintf(acc, sizeof acc, "%.2f", 100.0 * m.accuracy);
        std::snprintf(line, sizeof line, "%-8s %9.3f %9.3f %11.3f %9s\n",
                      detail::metrics_class_name(c, m.num_classes).c_str(), cm.precision, cm.f1, cm.sensitivity, acc);
        os << line;
    }
    os << "\nConfusion matrix (rows = true, columns = predicted), " << m.total << " samples\n";
    std::snprintf(line, sizeof line, "%-8s", "");
    os << line;
    for (std::size_t c = 0; c < m.num_classes; ++c) {
        std::snprintf(line, sizeof line, " %8s", detail::metrics_class_name(c, m.num_classes).c_str());
        os << line;
    }
    os << '\n';
    for (std::size_t r = 0; r < m.num_classes; ++r) {
        std::snprintf(line, sizeof line, "%-8s", detail::metrics_class_name(r, m.num_classes).c_str());
        os << line;
        for (std::size_t c = 0; c < m.num_classes; ++c) {
            std::snprintf(line, sizeof line, " %8zu", m.confusion[r][c]);
            os << line;
        }
        os << '\n';
    }
    for (std::size_t c = 0; c < m.num_classes; ++c) {
        const auto& cm = m.per_class[c];
        if (cm.precision_undefined || cm.sensitivity_undefined || cm.f1_undefined)
            os << "note: " << detail::metrics_class_name(c, m.num_classes)
               << " has a zero denominator; affected values reported as 0\n";
    }
    return os.str();
}

}  // namespace octx
