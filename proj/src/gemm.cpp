#include "bgnn/gemm.hpp"

#include <algorithm>
#include <vector>

namespace bgnn::gemm {

namespace {

constexpr std::size_t kColBlock = 256;
constexpr std::size_t kInnerBlock = 128;
constexpr std::size_t kParallelWork = std::size_t{1} << 16;

// Four output rows share each loaded row of B.
template <typename T>
inline void rows4(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c,
                  std::size_t ldc, std::size_t pn, std::size_t jn) {
    T* c0 = c;
    T* c1 = c + ldc;
    T* c2 = c + 2 * ldc;
    T* c3 = c + 3 * ldc;
    for (std::size_t p = 0; p < pn; ++p) {
        const T a0 = a[p];
        const T a1 = a[lda + p];
        const T a2 = a[2 * lda + p];
        const T a3 = a[3 * lda + p];
        const T* br = b + p * ldb;
#pragma GCC ivdep
        for (std::size_t j = 0; j < jn; ++j) {
            const T bv = br[j];
            c0[j] += a0 * bv;
            c1[j] += a1 * bv;
            c2[j] += a2 * bv;
            c3[j] += a3 * bv;
        }
    }
}

template <typename T>
inline void rows1(const T* a, const T* b, std::size_t ldb, T* c, std::size_t pn,
                  std::size_t jn) {
    for (std::size_t p = 0; p < pn; ++p) {
        const T av = a[p];
        const T* br = b + p * ldb;
#pragma GCC ivdep
        for (std::size_t j = 0; j < jn; ++j) c[j] += av * br[j];
    }
}

}  // namespace

template <typename T>
void nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
        bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, T(0));
    if (m == 0 || n == 0 || k == 0) return;
    const bool par = m * n * k >= kParallelWork;
    for (std::size_t j0 = 0; j0 < n; j0 += kColBlock) {
        const std::size_t jn = std::min(kColBlock, n - j0);
        for (std::size_t p0 = 0; p0 < k; p0 += kInnerBlock) {
            const std::size_t pn = std::min(kInnerBlock, k - p0);
            const std::ptrdiff_t quads = static_cast<std::ptrdiff_t>(m / 4);
#pragma omp parallel for schedule(static) if (par)
            for (std::ptrdiff_t q = 0; q < quads; ++q) {
                const std::size_t i = static_cast<std::size_t>(q) * 4;
                rows4(a + i * k + p0, k, b + p0 * n + j0, n, c + i * n + j0, n, pn, jn);
            }
            for (std::size_t i = static_cast<std::size_t>(quads) * 4; i < m; ++i) {
                rows1(a + i * k + p0, b + p0 * n + j0, n, c + i * n + j0, pn, jn);
            }
        }
    }
}

template <typename T>
void nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
        bool accumulate) {
    std::vector<T> bt(k * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    nn(m, n, k, a, bt.data(), c, accumulate);
}

template <typename T>
void tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
        bool accumulate) {
    if (!accumulate) std::fill(c, c + k * n, T(0));
    if (m == 0 || n == 0 || k == 0) return;
    const bool par = m * n * k >= kParallelWork;
    // Threads own disjoint bands of output rows; within a band every row of
    // A and B is streamed once and accumulation runs over r in order.
    constexpr std::size_t kBand = 16;
    const std::ptrdiff_t bands = static_cast<std::ptrdiff_t>((k + kBand - 1) / kBand);
#pragma omp parallel for schedule(static) if (par)
    for (std::ptrdiff_t bb = 0; bb < bands; ++bb) {
        const std::size_t p0 = static_cast<std::size_t>(bb) * kBand;
        const std::size_t p1 = std::min(k, p0 + kBand);
        for (std::size_t r = 0; r < m; ++r) {
            const T* ar = a + r * k;
            const T* br = b + r * n;
            for (std::size_t p = p0; p < p1; ++p) {
                const T av = ar[p];
                if (av == T(0)) continue;
                T* cr = c + p * n;
#pragma GCC ivdep
                for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
            }
        }
    }
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& bt) {
    if (a.cols() != bt.cols()) {
        throw ShapeError("matmul_nt inner dimension mismatch: " + shape_string(a.shape()) +
                         " vs " + shape_string(bt.shape()));
    }
    Tensor<T> out = Tensor<T>::matrix(a.rows(), bt.rows());
    nt(a.rows(), bt.rows(), a.cols(), a.data(), bt.data(), out.data());
    return out;
}

#define BGNN_GEMM_INST(T)                                                                   \
    template void nn<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool); \
    template void nt<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool); \
    template void tn<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool); \
    template Tensor<T> matmul_nt<T>(const Tensor<T>&, const Tensor<T>&);

BGNN_GEMM_INST(float)
BGNN_GEMM_INST(double)
#undef BGNN_GEMM_INST

}  // namespace bgnn::gemm
