#pragma once

// Naive reference implementations and helpers shared by the test binaries.
// The oracles work on unpacked values only and never call the kernels under test.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "bgnn/autograd.hpp"
#include "bgnn/bitcore.hpp"
#include "bgnn/graph.hpp"
#include "bgnn/tensor.hpp"

namespace bgnn::test {

template <typename T = float>
inline Tensor<T> random_pm1(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    std::bernoulli_distribution coin(0.5);
    Tensor<T> x = Tensor<T>::matrix(rows, cols);
    for (auto& v : x.storage()) v = coin(rng) ? T(1) : T(-1);
    return x;
}

template <typename T = float>
inline Tensor<T> random_normal(std::vector<std::size_t> shape, std::mt19937_64& rng,
                               double sigma = 1.0) {
    std::normal_distribution<double> n(0.0, sigma);
    Tensor<T> x(std::move(shape));
    for (auto& v : x.storage()) v = static_cast<T>(n(rng));
    return x;
}

inline std::size_t uniform(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// out[i][j] = sum_k a[i][k] * bt[j][k] over +-1 values, integer arithmetic.
template <typename T>
inline std::vector<std::int64_t> gemm_pm1(const Tensor<T>& a, const Tensor<T>& bt) {
    const std::size_t m = a.rows(), n = bt.rows(), d = a.cols();
    std::vector<std::int64_t> out(m * n, 0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            std::int64_t s = 0;
            for (std::size_t k = 0; k < d; ++k)
                s += static_cast<std::int64_t>(a.at(i, k)) * static_cast<std::int64_t>(bt.at(j, k));
            out[i * n + j] = s;
        }
    return out;
}

/// Count of differing positions, one element at a time.
template <typename T>
inline std::int64_t hamming_pm1(const Tensor<T>& x, std::size_t i, const Tensor<T>& y,
                                std::size_t j) {
    std::int64_t h = 0;
    for (std::size_t k = 0; k < x.cols(); ++k) h += x.at(i, k) != y.at(j, k);
    return h;
}

/// Row i: indices j != i sorted by (dist(i, j), j), first k kept.
inline std::vector<std::uint32_t> brute_knn(std::size_t n, std::size_t k,
                                            const std::function<double(std::size_t, std::size_t)>& dist) {
    std::vector<std::uint32_t> out;
    out.reserve(n * k);
    std::vector<std::pair<double, std::uint32_t>> row;
    for (std::size_t i = 0; i < n; ++i) {
        row.clear();
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) row.emplace_back(dist(i, j), static_cast<std::uint32_t>(j));
        std::sort(row.begin(), row.end());
        for (std::size_t s = 0; s < k; ++s) out.push_back(row[s].second);
    }
    return out;
}

template <typename T>
inline double sq_l2(const Tensor<T>& x, std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) {
        const double d = static_cast<double>(x.at(i, c)) - static_cast<double>(x.at(j, c));
        s += d * d;
    }
    return s;
}

struct GradCheck {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::string worst;
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps near-zero gradients, where
/// finite differences carry mostly rounding error, from dominating.
inline double rel_error(double analytic, double numeric, double floor = 1e-4) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares analytic gradients of a scalar function of `leaves` with central
/// differences. `build` records the function on a fresh tape given one Var per
/// leaf. Up to `samples_per_leaf` elements of each leaf are perturbed.
inline GradCheck grad_check(std::vector<Tensor<double>> leaves,
                            const std::function<Var(Tape<double>&, const std::vector<Var>&)>& build,
                            std::size_t samples_per_leaf = 1000, double eps = 1e-6,
                            std::uint64_t seed = 7) {
    std::vector<Parameter<double>> params;
    params.reserve(leaves.size());
    for (auto& l : leaves) params.emplace_back(l);
    auto eval = [&](bool with_grad) {
        Tape<double> t(with_grad);
        std::vector<Var> vars;
        for (auto& p : params) vars.push_back(t.parameter(p));
        Var out = build(t, vars);
        const double v = t.value(out)[0];
        if (with_grad) {
            for (auto& p : params) p.zero_grad();
            t.backward(out);
        }
        return v;
    };
    eval(true);
    std::vector<Tensor<double>> analytic;
    for (auto& p : params) analytic.push_back(p.grad);
    GradCheck r;
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l < params.size(); ++l) {
        const std::size_t n = params[l].value.size();
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        if (n > samples_per_leaf) {
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(samples_per_leaf);
        }
        for (auto i : idx) {
            double& v = params[l].value[i];
            const double keep = v;
            v = keep + eps;
            const double up = eval(false);
            v = keep - eps;
            const double down = eval(false);
            v = keep;
            const double numeric = (up - down) / (2 * eps);
            const double e = rel_error(analytic[l][i], numeric);
            ++r.checked;
            if (e > r.max_rel_error) {
                r.max_rel_error = e;
                r.worst = "leaf " + std::to_string(l) + "[" + std::to_string(i) + "] analytic " +
                          std::to_string(analytic[l][i]) + " numeric " + std::to_string(numeric);
            }
        }
    }
    return r;
}

}  // namespace bgnn::test
