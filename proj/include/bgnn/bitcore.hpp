#pragma once

// Bit-packed {-1,+1} matrices and the exact XNOR/popcount kernels.
//
// Layout: row-major, ceil(dim/64) little-endian 64-bit words per row. Bit b of
// word w holds element 64*w + b; a set bit is +1, a clear bit is -1. Padding
// bits past `dim` are always zero.

#include <bit>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "bgnn/error.hpp"
#include "bgnn/tensor.hpp"

namespace bgnn {

/// Read-only view of one packed row.
struct BitRow {
    std::span<const std::uint64_t> words;
    std::size_t dim = 0;
};

class BitMatrix {
public:
    static constexpr std::size_t kWordBits = 64;

    BitMatrix() = default;
    /// All elements -1 (all bits clear).
    BitMatrix(std::size_t rows, std::size_t dim);

    /// Adopts raw words; rejects a wrong word count or non-zero padding bits.
    static BitMatrix from_words(std::size_t rows, std::size_t dim,
                                std::vector<std::uint64_t> words);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t dim() const noexcept { return dim_; }
    std::size_t words_per_row() const noexcept { return words_per_row_; }

    static std::size_t words_for(std::size_t dim) noexcept {
        return (dim + kWordBits - 1) / kWordBits;
    }
    /// Mask of the valid bits in the last word of a row.
    std::uint64_t tail_mask() const noexcept;

    BitRow row(std::size_t r) const noexcept {
        return {{words_.data() + r * words_per_row_, words_per_row_}, dim_};
    }
    std::span<std::uint64_t> row_words(std::size_t r) noexcept {
        return {words_.data() + r * words_per_row_, words_per_row_};
    }

    bool bit(std::size_t r, std::size_t k) const noexcept {
        return (words_[r * words_per_row_ + k / kWordBits] >> (k % kWordBits)) & 1u;
    }
    void set(std::size_t r, std::size_t k, bool plus_one) noexcept {
        auto& w = words_[r * words_per_row_ + k / kWordBits];
        const std::uint64_t m = std::uint64_t{1} << (k % kWordBits);
        w = plus_one ? (w | m) : (w & ~m);
    }
    int value(std::size_t r, std::size_t k) const noexcept { return bit(r, k) ? 1 : -1; }

    const std::vector<std::uint64_t>& words() const noexcept { return words_; }

    bool padding_is_zero() const noexcept;

    friend bool operator==(const BitMatrix&, const BitMatrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t dim_ = 0;
    std::size_t words_per_row_ = 0;
    std::vector<std::uint64_t> words_;
};

enum class RescaleKind { channel_wise, rank1_per_mode };

/// Learned rescaling applied to a binary dot-product output of shape
/// rows x channels. Channel-wise: one factor per output channel (a single
/// factor broadcasts to every channel). Rank-1: alpha per channel, beta per
/// node position and gamma per neighbour slot, with row r mapping to node
/// (r / w) % h and slot r % w.
template <typename T>
struct RescaleTensor {
    RescaleKind kind = RescaleKind::channel_wise;
    Tensor<T> alpha;
    Tensor<T> beta;
    Tensor<T> gamma;

    static RescaleTensor channel_wise(Tensor<T> a) {
        return {RescaleKind::channel_wise, std::move(a), {}, {}};
    }
    static RescaleTensor rank1(Tensor<T> a, Tensor<T> b, Tensor<T> g) {
        return {RescaleKind::rank1_per_mode, std::move(a), std::move(b), std::move(g)};
    }
    static RescaleTensor ones(std::size_t channels) {
        return channel_wise(Tensor<T>({channels}, T(1)));
    }

    /// Throws ShapeError unless the factors broadcast over rows x cols.
    void check_broadcast(std::size_t rows, std::size_t cols) const;
    bool all_finite() const noexcept {
        return alpha.all_finite() && beta.all_finite() && gamma.all_finite();
    }
    T factor(std::size_t row, std::size_t col) const noexcept {
        const T a = alpha.size() == 1 ? alpha[0] : alpha[col];
        if (kind == RescaleKind::channel_wise) return a;
        const std::size_t w = gamma.size();
        const std::size_t h = beta.size();
        return a * beta[(row / w) % h] * gamma[row % w];
    }
};

/// Integer matrix (pairwise distances, raw XNOR products).
using IntMatrix = Tensor<std::int32_t>;

/// +1 where x >= 0, -1 elsewhere. Throws ValueError on non-finite input.
template <typename T>
Tensor<T> sign_quantize(const Tensor<T>& x);

/// Packs a tensor valued exactly in {-1,+1}; rows = leading dim, dim = cols().
/// Throws ValueError on any other value.
template <typename T>
BitMatrix pack(const Tensor<T>& x);

/// Packs sign(x) of an arbitrary finite matrix (x >= 0 -> +1) without
/// validating that x is already binary.
template <typename T>
BitMatrix pack_signs(const T* data, std::size_t rows, std::size_t cols);

template <typename T = float>
Tensor<T> unpack(const BitMatrix& b);

/// Sum_k a_k * b_k over {-1,+1} vectors: dim - 2 * popcount(a xor b).
std::int64_t xnor_dot(const BitRow& a, const BitRow& b);

/// Number of differing positions: popcount(a xor b).
std::int64_t hamming_distance(const BitRow& a, const BitRow& b);

/// popcount(a xor b) over `words` words, no dimension checks.
inline std::int64_t xor_popcount(const std::uint64_t* a, const std::uint64_t* b,
                                 std::size_t words) noexcept {
    std::int64_t acc0 = 0, acc1 = 0, acc2 = 0, acc3 = 0;
    std::size_t w = 0;
    for (; w + 4 <= words; w += 4) {
        acc0 += std::popcount(a[w] ^ b[w]);
        acc1 += std::popcount(a[w + 1] ^ b[w + 1]);
        acc2 += std::popcount(a[w + 2] ^ b[w + 2]);
        acc3 += std::popcount(a[w + 3] ^ b[w + 3]);
    }
    for (; w < words; ++w) acc0 += std::popcount(a[w] ^ b[w]);
    return acc0 + acc1 + acc2 + acc3;
}

/// Raw XNOR product matrix: out[i][j] = xnor_dot(a.row(i), bt.row(j)).
/// `bt` holds the right operand transposed (one packed row per output column).
IntMatrix binary_gemm_int(const BitMatrix& a, const BitMatrix& bt);

/// (sign(A) xnor-product sign(B)) elementwise-scaled by gamma. Integer
/// accumulation; the rescale is a single real multiply per output.
template <typename T = float>
Tensor<T> binary_gemm(const BitMatrix& a, const BitMatrix& bt, const RescaleTensor<T>& gamma);

/// out[i][j] = hamming_distance(row i, row j); symmetric, zero diagonal.
IntMatrix pairwise_hamming(const BitMatrix& x);

/// Float reference for the pairwise kernel: out[i][j] = ||x_i - x_j||_2^2.
template <typename T>
Tensor<T> pairwise_sq_l2(const Tensor<T>& x);

}  // namespace bgnn
