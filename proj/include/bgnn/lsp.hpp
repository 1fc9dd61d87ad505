#pragma once

// Local structure vectors: for each node, a softmax over its neighbourhood of
// a similarity score between the node's features and each neighbour's.

#include <cstdint>
#include <span>
#include <vector>

#include "bgnn/autograd.hpp"
#include "bgnn/graph.hpp"
#include "bgnn/tensor.hpp"

namespace bgnn {

/// rbf_l2: exp(-||a - b||^2). hamming: exp(-0.5 * sum_k (1 - a_k b_k)), the
/// smooth form of exp(-Hamming) that is exact on {-1,+1} vectors.
template <typename T>
double similarity(std::span<const T> a, std::span<const T> b, Similarity sim);

/// Neighbours of node i in `a` followed by those of `b` not already listed.
std::vector<std::uint32_t> union_neighbourhood(const GraphTopology& a, const GraphTopology& b,
                                               std::size_t i);

/// Softmax of similarity(x_i, x_j) over j in `neighbourhood`, in that order.
template <typename T>
std::vector<double> local_structure(const Tensor<T>& x, std::size_t i,
                                    std::span<const std::uint32_t> neighbourhood, Similarity sim);

/// LS_i for every node over its topology row; each row sums to 1.
template <typename T>
std::vector<std::vector<double>> lsp_vectors(const Tensor<T>& x, const GraphTopology& topo,
                                             Similarity sim);

}  // namespace bgnn
