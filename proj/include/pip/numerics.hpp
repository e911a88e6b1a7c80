#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

#include "pip/tape.hpp"
#include "pip/tensor.hpp"

namespace pip {

// Numerically stable softmax along one axis (max-subtraction).
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    const int rank = static_cast<int>(x.shape.size());
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw DimensionError("softmax: invalid axis " + std::to_string(axis));
    int64_t inner = 1, outer = 1;
    const int64_t n = x.shape[axis];
    for (int i = 0; i < axis; ++i) outer *= x.shape[i];
    for (int i = axis + 1; i < rank; ++i) inner *= x.shape[i];
    Tensor<T> out(x.shape);
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * n * inner + in;
            T mx = x.data[base];
            for (int64_t k = 1; k < n; ++k) mx = std::max(mx, x.data[base + k * inner]);
            T sum = 0;
            for (int64_t k = 0; k < n; ++k) {
                T e = std::exp(x.data[base + k * inner] - mx);
                out.data[base + k * inner] = e;
                sum += e;
            }
            for (int64_t k = 0; k < n; ++k) out.data[base + k * inner] /= sum;
        }
    }
    return out;
}

// Loss value only; the differentiable version lives on Tape.
template <typename T>
T masked_cross_entropy(const Tensor<T>& logits, const std::vector<int32_t>& targets,
                       const std::vector<uint8_t>& mask) {
    Tape<T> tape(false);
    auto l = tape.input(logits, false);
    return tape.value(tape.masked_cross_entropy(l, targets, mask)).data[0];
}

struct AdamConfig {
    float learning_rate = 3e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float epsilon = 1e-8f;
};

// Per-parameter Adam moments; the step counter is shared by the owner.
template <typename T>
struct AdamMoments {
    std::vector<T> m, v;
};

// Standard bias-corrected Adam. step is the post-increment step count (>=1).
template <typename T>
void adam_update(Tensor<T>& params, const Tensor<T>& grads, AdamMoments<T>& mom, int64_t step,
                 const AdamConfig& cfg) {
    if (!same_shape(params, grads)) throw DimensionError("adam_update: param/grad shape mismatch");
    if (mom.m.empty()) {
        mom.m.assign(params.data.size(), T(0));
        mom.v.assign(params.data.size(), T(0));
    }
    if (mom.m.size() != params.data.size()) throw DimensionError("adam_update: moment size mismatch");
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T corr1 = T(1) - std::pow(b1, static_cast<T>(step));
    const T corr2 = T(1) - std::pow(b2, static_cast<T>(step));
    const T lr = static_cast<T>(cfg.learning_rate), eps = static_cast<T>(cfg.epsilon);
    for (size_t i = 0; i < params.data.size(); ++i) {
        const T g = grads.data[i];
        mom.m[i] = b1 * mom.m[i] + (T(1) - b1) * g;
        mom.v[i] = b2 * mom.v[i] + (T(1) - b2) * g * g;
        const T mhat = mom.m[i] / corr1;
        const T vhat = mom.v[i] / corr2;
        params.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

// Central-difference check of a tape-built scalar function. Returns the max
// over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// Meant to run in double.
inline double gradient_check(const std::function<Tape<double>::Id(Tape<double>&, Tape<double>::Id)>& f,
                             const Tensor<double>& x, double h = 1e-5) {
    auto eval = [&](const Tensor<double>& pt) {
        Tape<double> tape(false);
        auto in = tape.input(pt, false);
        double v = tape.value(f(tape, in)).data[0];
        if (!std::isfinite(v)) throw NumericError("gradient_check: non-finite function value");
        return v;
    };
    Tape<double> tape(true);
    auto in = tape.input(x, true);
    auto root = f(tape, in);
    tape.backward(root);
    const Tensor<double>& analytic = tape.grad(in);
    (void)eval(x);

    double worst = 0;
    Tensor<double> pt = x;
    for (size_t i = 0; i < x.data.size(); ++i) {
        pt.data[i] = x.data[i] + h;
        const double fp = eval(pt);
        pt.data[i] = x.data[i] - h;
        const double fm = eval(pt);
        pt.data[i] = x.data[i];
        const double num = (fp - fm) / (2 * h);
        const double ana = analytic.data[i];
        const double denom = std::max({std::abs(ana), std::abs(num), 1e-8});
        worst = std::max(worst, std::abs(ana - num) / denom);
    }
    return worst;
}

}  // namespace pip
