#include "bgnn/graph.hpp"

#include <algorithm>
#include <numeric>
#include <string>
#include <utility>

#include "bgnn/gemm.hpp"

namespace bgnn {

GraphTopology::GraphTopology(std::size_t n, std::size_t k, std::vector<std::uint32_t> neighbours)
    : n_(n), k_(k), idx_(std::move(neighbours)) {
    if (idx_.size() != n * k) throw ShapeError("topology expects n*k neighbour entries");
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t s = 0; s < k; ++s) {
            const auto j = idx_[i * k + s];
            if (j >= n) throw ValueError("neighbour index out of range");
            if (j == i) throw ValueError("topology row lists its own node");
        }
    }
}

GraphTopology GraphTopology::concat(std::span<const GraphTopology> parts) {
    if (parts.empty()) return {};
    const std::size_t k = parts.front().k();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.k() != k) throw ShapeError("cannot concatenate topologies with different k");
        total += p.nodes();
    }
    std::vector<std::uint32_t> idx;
    idx.reserve(total * k);
    std::uint32_t offset = 0;
    for (const auto& p : parts) {
        for (auto j : p.indices()) idx.push_back(j + offset);
        offset += static_cast<std::uint32_t>(p.nodes());
    }
    GraphTopology out;
    out.n_ = total;
    out.k_ = k;
    out.idx_ = std::move(idx);
    return out;
}

namespace {
void check_k(std::size_t n, std::size_t k) {
    if (k == 0 || k >= n) {
        throw ValueError("k-NN needs 1 <= k <= n-1 (n=" + std::to_string(n) +
                         ", k=" + std::to_string(k) + ")");
    }
}
}  // namespace

template <typename S>
GraphTopology knn_from_scores(const Tensor<S>& scores, std::size_t k) {
    const std::size_t n = scores.rows();
    if (scores.cols() != n) throw ShapeError("score matrix must be square");
    check_k(n, k);
    std::vector<std::uint32_t> idx(n * k);
    // (score, index) pairs order exactly by the tie rule; an insertion list
    // holds the k best seen so far.
    using Entry = std::pair<S, std::uint32_t>;
    std::vector<Entry> best(k);
    for (std::size_t i = 0; i < n; ++i) {
        const S* row = scores.data() + i * n;
        std::size_t filled = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const Entry e{row[j], static_cast<std::uint32_t>(j)};
            if (filled == k && !(e < best[k - 1])) continue;
            std::size_t pos = filled < k ? filled++ : k - 1;
            while (pos > 0 && e < best[pos - 1]) {
                best[pos] = best[pos - 1];
                --pos;
            }
            best[pos] = e;
        }
        for (std::size_t q = 0; q < k; ++q) idx[i * k + q] = best[q].second;
    }
    return GraphTopology(n, k, std::move(idx));
}

template <typename T>
GraphTopology knn_l2(const Tensor<T>& features, std::size_t k) {
    check_k(features.rows(), k);
    return knn_from_scores(pairwise_sq_l2(features), k);
}

GraphTopology knn_hamming(const BitMatrix& features, std::size_t k) {
    check_k(features.rows(), k);
    return knn_from_scores(pairwise_hamming(features), k);
}

template <typename T>
Tensor<T> knn_score_matmul(const Tensor<T>& features, bool strict) {
    if (strict) {
        for (std::size_t i = 0; i < features.size(); ++i) {
            if (features[i] != T(1) && features[i] != T(-1)) {
                throw ValueError("knn_score_matmul: strict mode requires {-1,+1} features");
            }
        }
    }
    const std::size_t n = features.rows();
    const std::size_t d = features.cols();
    Tensor<T> gram = Tensor<T>::matrix(n, n);
    gemm::nt(n, n, d, features.data(), features.data(), gram.data());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const T v = gram.at(i, j) - (i == j ? static_cast<T>(d) : T(0));
            gram.at(i, j) = -v;
        }
    }
    return gram;
}

template <typename T>
GraphTopology knn_batched(const Tensor<T>& features, std::size_t graph_size, std::size_t k,
                          KnnMetric metric) {
    if (graph_size == 0 || features.rows() % graph_size != 0) {
        throw ShapeError("feature rows are not a whole number of graphs");
    }
    const std::size_t graphs = features.rows() / graph_size;
    const std::size_t d = features.cols();
    const bool binary = std::all_of(features.data(), features.data() + features.size(),
                                    [](T v) { return v == T(1) || v == T(-1); });
    std::vector<GraphTopology> parts(graphs);
    for (std::size_t g = 0; g < graphs; ++g) {
        const T* base = features.data() + g * graph_size * d;
        if (binary) {
            // On {-1,+1} codes both metrics order neighbours by Hamming distance.
            parts[g] = knn_hamming(pack_signs(base, graph_size, d), k);
            continue;
        }
        Tensor<T> slice({graph_size, d}, std::vector<T>(base, base + graph_size * d));
        parts[g] = metric == KnnMetric::l2 ? knn_l2(slice, k)
                                           : knn_from_scores(knn_score_matmul(slice, false), k);
    }
    return GraphTopology::concat(parts);
}

template GraphTopology knn_from_scores(const Tensor<float>&, std::size_t);
template GraphTopology knn_from_scores(const Tensor<double>&, std::size_t);
template GraphTopology knn_from_scores(const Tensor<std::int32_t>&, std::size_t);
template GraphTopology knn_l2(const Tensor<float>&, std::size_t);
template GraphTopology knn_l2(const Tensor<double>&, std::size_t);
template Tensor<float> knn_score_matmul(const Tensor<float>&, bool);
template Tensor<double> knn_score_matmul(const Tensor<double>&, bool);
template GraphTopology knn_batched(const Tensor<float>&, std::size_t, std::size_t, KnnMetric);
template GraphTopology knn_batched(const Tensor<double>&, std::size_t, std::size_t, KnnMetric);

}  // namespace bgnn
