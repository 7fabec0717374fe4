#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace octx {

inline constexpr std::size_t kNumClasses = 4;

// Output index order of the network head.
enum class ClassLabel : int { CNV = 0, DME = 1, DRUSEN = 2, NORMAL = 3 };

inline constexpr std::array<std::string_view, kNumClasses> kClassNames{"CNV", "DME", "DRUSEN", "NORMAL"};

inline std::string_view class_name(ClassLabel c) { return kClassNames[static_cast<std::size_t>(c)]; }
inline std::string_view class_name(std::size_t i) { return kClassNames.at(i); }

inline std::optional<ClassLabel> parse_class(std::string_view s) {
    for (std::size_t i = 0; i < kNumClasses; ++i)
        if (kClassNames[i] == s) return static_cast<ClassLabel>(i);
    return std::nullopt;
}

inline std::size_t index_of(ClassLabel c) { return static_cast<std::size_t>(c); }

}  // namespace octx
