#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "iriskit/core/error.hpp"

namespace iriskit::nn {

// Dense row-major tensor. Single precision everywhere except gradient
// checking, which instantiates the double variant.
template <typename T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(std::vector<int> shape)
        : shape_(std::move(shape)), data_(checked_size(shape_), T(0)) {}

    TensorT(std::vector<int> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != checked_size(shape_)) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_string(shape_));
        }
    }

    static TensorT zeros(std::vector<int> shape) { return TensorT(std::move(shape)); }

    static TensorT full(std::vector<int> shape, T value) {
        TensorT t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    static TensorT scalar(T value) { return TensorT({1}, {value}); }

    // Fan-in-scaled uniform init, U(-b, b) with b = sqrt(1 / fan_in).
    static TensorT uniform_fan_in(std::vector<int> shape, int fan_in, std::mt19937& rng) {
        TensorT t(std::move(shape));
        const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(std::max(fan_in, 1))));
        std::uniform_real_distribution<double> dist(-static_cast<double>(bound),
                                                    static_cast<double>(bound));
        for (auto& v : t.data_) v = static_cast<T>(dist(rng));
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& values() { return data_; }
    const std::vector<T>& values() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    // 3D accessors for [C,H,W] feature maps.
    T& at(int c, int h, int w) {
        return data_[(static_cast<std::size_t>(c) * shape_[1] + h) * shape_[2] + w];
    }
    const T& at(int c, int h, int w) const {
        return data_[(static_cast<std::size_t>(c) * shape_[1] + h) * shape_[2] + w];
    }

    bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (const T& v : data_) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    template <typename U>
    TensorT<U> cast() const {
        std::vector<U> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return TensorT<U>(shape_, std::move(out));
    }

    static std::string shape_string(const std::vector<int>& shape) {
        std::ostringstream os;
        os << '(';
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) os << ',';
            os << shape[i];
        }
        os << ')';
        return os.str();
    }

    std::string shape_string() const { return shape_string(shape_); }

private:
    static std::size_t checked_size(const std::vector<int>& shape) {
        if (shape.empty()) {
            throw DimensionError("tensor shape must have at least one dimension");
        }
        std::size_t n = 1;
        for (int d : shape) {
            if (d <= 0) {
                throw DimensionError("tensor dimensions must be positive, got " +
                                     shape_string(shape));
            }
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    std::vector<int> shape_;
    std::vector<T> data_;
};

using Tensor = TensorT<float>;

template <typename T>
void require_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* what) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(what) + ": shape " + a.shape_string() +
                             " vs " + b.shape_string());
    }
}

} // namespace iriskit::nn
