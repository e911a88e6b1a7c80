#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace pip {

struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense row-major tensor. T is float for training/inference, double for
// gradient checks.
template <typename T>
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel()), T(0));
    }
    Tensor(std::vector<int64_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != numel())
            throw DimensionError("tensor data length does not match shape");
    }

    int64_t numel() const {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        return n;
    }
    int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
    int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    T& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }
    T at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols() + c)]; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape == b.shape;
}

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

}  // namespace pip
