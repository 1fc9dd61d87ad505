#pragma once

#include <cstddef>

#include "bgnn/tensor.hpp"

// Dense real matrix products used by the training engine and as the float
// baseline for the binary kernels. Row-major throughout. Every output element
// accumulates its inner products in ascending inner index, so results do not
// depend on blocking or thread count.

namespace bgnn::gemm {

/// C(m x n) (+)= A(m x k) * B(k x n)
template <typename T>
void nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
        bool accumulate = false);

/// C(m x n) (+)= A(m x k) * B(n x k)^T
template <typename T>
void nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
        bool accumulate = false);

/// C(k x n) (+)= A(m x k)^T * B(m x n)
template <typename T>
void tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
        bool accumulate = false);

/// Float GEMM in the same operand layout as binary_gemm: A is m x d, Bt is
/// n x d (the right operand transposed). Returns m x n.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& bt);

}  // namespace bgnn::gemm
