#include "bgnn/lsp.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace bgnn {

template <typename T>
double similarity(std::span<const T> a, std::span<const T> b, Similarity sim) {
    // Eight independent partial sums so the loop vectorizes; the order is fixed.
    constexpr std::size_t kLanes = 8;
    std::array<double, kLanes> lane{};
    const std::size_t n = a.size();
    const std::size_t body = n - n % kLanes;
    const bool rbf = sim == Similarity::rbf_l2;
    auto term = [&](std::size_t k) {
        const double x = static_cast<double>(a[k]);
        const double y = static_cast<double>(b[k]);
        return rbf ? (x - y) * (x - y) : 0.5 * (1.0 - x * y);
    };
    for (std::size_t k = 0; k < body; k += kLanes)
        for (std::size_t l = 0; l < kLanes; ++l) lane[l] += term(k + l);
    double acc = 0.0;
    for (double v : lane) acc += v;
    for (std::size_t k = body; k < n; ++k) acc += term(k);
    return std::exp(-acc);
}

std::vector<std::uint32_t> union_neighbourhood(const GraphTopology& a, const GraphTopology& b,
                                               std::size_t i) {
    auto na = a.neighbours(i);
    std::vector<std::uint32_t> out(na.begin(), na.end());
    for (auto j : b.neighbours(i)) {
        if (std::find(na.begin(), na.end(), j) == na.end()) out.push_back(j);
    }
    return out;
}

template <typename T>
std::vector<double> local_structure(const Tensor<T>& x, std::size_t i,
                                    std::span<const std::uint32_t> neighbourhood, Similarity sim) {
    if (neighbourhood.empty()) throw ValueError("local structure of a node without neighbours");
    std::vector<double> s(neighbourhood.size());
    double mx = -1e300;
    for (std::size_t q = 0; q < neighbourhood.size(); ++q) {
        s[q] = similarity(x.row(i), x.row(neighbourhood[q]), sim);
        mx = std::max(mx, s[q]);
    }
    double z = 0.0;
    for (auto& v : s) {
        v = std::exp(v - mx);
        z += v;
    }
    for (auto& v : s) v /= z;
    return s;
}

template <typename T>
std::vector<std::vector<double>> lsp_vectors(const Tensor<T>& x, const GraphTopology& topo,
                                             Similarity sim) {
    if (topo.nodes() != x.rows()) throw ShapeError("lsp_vectors: topology/feature node count differ");
    if (topo.k() == 0) throw ValueError("lsp_vectors: empty neighbourhood");
    std::vector<std::vector<double>> out(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) out[i] = local_structure(x, i, topo.neighbours(i), sim);
    return out;
}

template double similarity(std::span<const float>, std::span<const float>, Similarity);
template double similarity(std::span<const double>, std::span<const double>, Similarity);
template std::vector<double> local_structure(const Tensor<float>&, std::size_t,
                                             std::span<const std::uint32_t>, Similarity);
template std::vector<double> local_structure(const Tensor<double>&, std::size_t,
                                             std::span<const std::uint32_t>, Similarity);
template std::vector<std::vector<double>> lsp_vectors(const Tensor<float>&, const GraphTopology&,
                                                      Similarity);
template std::vector<std::vector<double>> lsp_vectors(const Tensor<double>&, const GraphTopology&,
                                                      Similarity);

}  // namespace bgnn
