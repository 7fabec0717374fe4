#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace octx {

// Shape or length disagreement between operands.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Out-of-range hyperparameter (dropout rate, segment count, ...).
class ParameterError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Non-finite values or singular systems.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Filesystem failures outside the weight-file format (logs, stores, outputs).
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += 'x';
        out += std::to_string(s[i]);
    }
    return out;
}

// Dense row-major n-d array. Images and activations are HWC, conv kernels
// are kh x kw x Cin x Cout, dense weights are in x out.
template <typename T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape, T fill = T{})
        : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
        for (auto d : shape_)
            if (d == 0) throw DimensionError("tensor dimension must be positive: " + shape_str(shape_));
    }

    BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_size(shape_) != data_.size())
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
    }

    BasicTensor(std::initializer_list<std::size_t> shape, T fill = T{})
        : BasicTensor(Shape(shape), fill) {}

    template <typename U>
    static BasicTensor cast(const BasicTensor<U>& other) {
        std::vector<T> d(other.size());
        std::transform(other.data().begin(), other.data().end(), d.begin(),
                       [](U v) { return static_cast<T>(v); });
        return BasicTensor(other.shape(), std::move(d));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    T* raw() { return data_.data(); }
    const T* raw() const { return data_.data(); }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    // 3-d HWC accessor.
    T& at(std::size_t y, std::size_t x, std::size_t c) { return data_[(y * shape_[1] + x) * shape_[2] + c]; }
    const T& at(std::size_t y, std::size_t x, std::size_t c) const {
        return data_[(y * shape_[1] + x) * shape_[2] + c];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    BasicTensor reshaped(Shape s) const {
        if (shape_size(s) != data_.size())
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        return BasicTensor(std::move(s), data_);
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(static_cast<double>(v)); });
    }

    bool operator==(const BasicTensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    Shape shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

inline void require_shape(const Shape& got, const Shape& want, const std::string& what) {
    if (got != want)
        throw DimensionError(what + ": expected shape " + shape_str(want) + ", got " + shape_str(got));
}

inline void require_rank(const Shape& got, std::size_t rank, const std::string& what) {
    if (got.size() != rank)
        throw DimensionError(what + ": expected rank " + std::to_string(rank) + ", got shape " + shape_str(got));
}

}  // namespace octx
