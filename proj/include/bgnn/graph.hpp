#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bgnn/bitcore.hpp"
#include "bgnn/tensor.hpp"

namespace bgnn {

/// Fixed-k neighbour lists. Row i holds the k neighbours of node i, nearest
/// first. Several graphs may share one topology with disjoint index ranges.
class GraphTopology {
public:
    GraphTopology() = default;
    GraphTopology(std::size_t n, std::size_t k, std::vector<std::uint32_t> neighbours);

    std::size_t nodes() const noexcept { return n_; }
    std::size_t k() const noexcept { return k_; }
    std::span<const std::uint32_t> neighbours(std::size_t i) const noexcept {
        return {idx_.data() + i * k_, k_};
    }
    std::uint32_t neighbour(std::size_t i, std::size_t slot) const noexcept {
        return idx_[i * k_ + slot];
    }
    const std::vector<std::uint32_t>& indices() const noexcept { return idx_; }

    /// Concatenates per-graph topologies, offsetting indices so graph g's nodes
    /// follow those of graphs 0..g-1.
    static GraphTopology concat(std::span<const GraphTopology> parts);

    friend bool operator==(const GraphTopology&, const GraphTopology&) = default;

private:
    std::size_t n_ = 0;
    std::size_t k_ = 0;
    std::vector<std::uint32_t> idx_;
};

enum class KnnMetric { l2, hamming_matmul };

/// Row i: the k nodes j != i with the smallest score[i][j], ties to the smaller
/// index. Throws if k is 0 or k >= n.
template <typename S>
GraphTopology knn_from_scores(const Tensor<S>& scores, std::size_t k);

/// Exact k-NN in squared Euclidean distance.
template <typename T>
GraphTopology knn_l2(const Tensor<T>& features, std::size_t k);

/// Exact k-NN in Hamming distance over packed codes.
GraphTopology knn_hamming(const BitMatrix& features, std::size_t k);

/// -(X X^T - d I) for X valued in {-1,+1}: zero diagonal, 2*Hamming - d off it.
/// With `strict`, non-binary entries raise ValueError.
template <typename T>
Tensor<T> knn_score_matmul(const Tensor<T>& features, bool strict = true);

/// Per-graph k-NN over `features` holding consecutive graphs of `graph_size`
/// nodes. hamming_matmul on exactly binary features runs on packed codes.
template <typename T>
GraphTopology knn_batched(const Tensor<T>& features, std::size_t graph_size, std::size_t k,
                          KnnMetric metric);

}  // namespace bgnn
