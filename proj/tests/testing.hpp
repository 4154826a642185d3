#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "freqback/autodiff.hpp"
#include "freqback/data.hpp"
#include "freqback/models.hpp"

namespace fbtest {

using freqback::Shape;
using freqback::Tensor;

inline std::vector<double> random_values(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

inline Tensor random_tensor(Shape s, std::uint64_t seed, bool grad = true, double lo = -1.0, double hi = 1.0) {
    auto n = freqback::numel(s);
    return Tensor(std::move(s), random_values(n, seed, lo, hi), grad);
}

/// Max relative error between backward gradients and central differences
/// for a scalar-valued function of several tensors. Relative error is
/// |a - n| / max(|a|, |n|, floor).
inline double gradient_error(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                             double h = 1e-3, double floor = 1e-2) {
    for (auto& t : inputs) t.set_requires_grad(true), t.zero_grad();
    auto loss = f(inputs);
    freqback::backward(loss);
    std::vector<std::vector<double>> analytic;
    for (auto& t : inputs)
        analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                           : std::vector<double>(t.size(), 0.0));
    double worst = 0.0;
    freqback::NoGradGuard ng;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto v = inputs[k].mutable_values();
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double x0 = v[i];
            v[i] = x0 + h;
            const double up = f(inputs).item();
            v[i] = x0 - h;
            const double dn = f(inputs).item();
            v[i] = x0;
            const double num = (up - dn) / (2.0 * h);
            const double a = analytic[k][i];
            worst = std::max(worst, std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor}));
        }
    }
    return worst;
}

/// Weighted sum so every output entry contributes with a distinct weight.
inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed = 99) {
    Tensor w(y.shape(), random_values(y.size(), seed));
    return freqback::sum(freqback::mul(y, w));
}

/// Small labeled dataset with random values.
inline freqback::TimeSeriesDataset random_dataset(std::size_t n, std::size_t T, std::size_t M, int C,
                                                  std::uint64_t seed) {
    freqback::TimeSeriesDataset ds;
    ds.length = T;
    ds.channels = M;
    ds.classes = C;
    ds.values = random_values(n * T * M, seed);
    for (std::size_t i = 0; i < n; ++i) ds.labels.push_back(static_cast<int>(i % static_cast<std::size_t>(C)));
    return ds;
}

inline freqback::ModelSpec tiny_spec(freqback::Architecture a, std::size_t T = 6, std::size_t M = 2, int C = 3) {
    freqback::ModelSpec s;
    s.arch = a;
    s.length = T;
    s.channels = M;
    s.classes = C;
    s.hidden = 4;
    s.layers = 1;
    s.kernel = 3;
    s.dilations = {1, 2};
    s.seed = 5;
    return s;
}

}  // namespace fbtest
