#include "bgnn/bitcore.hpp"

#include <cmath>
#include <string>

namespace bgnn {

BitMatrix::BitMatrix(std::size_t rows, std::size_t dim)
    : rows_(rows), dim_(dim), words_per_row_(words_for(dim)), words_(rows * words_for(dim), 0) {}

BitMatrix BitMatrix::from_words(std::size_t rows, std::size_t dim,
                                std::vector<std::uint64_t> words) {
    BitMatrix m(rows, dim);
    if (words.size() != m.words_.size()) {
        throw ShapeError("packed word count " + std::to_string(words.size()) + " != expected " +
                         std::to_string(m.words_.size()));
    }
    m.words_ = std::move(words);
    if (!m.padding_is_zero()) throw ValueError("packed rows carry non-zero padding bits");
    return m;
}

std::uint64_t BitMatrix::tail_mask() const noexcept {
    const std::size_t rem = dim_ % kWordBits;
    return rem == 0 ? ~std::uint64_t{0} : (std::uint64_t{1} << rem) - 1;
}

bool BitMatrix::padding_is_zero() const noexcept {
    if (words_per_row_ == 0) return true;
    const std::uint64_t pad = ~tail_mask();
    for (std::size_t r = 0; r < rows_; ++r) {
        if (words_[r * words_per_row_ + words_per_row_ - 1] & pad) return false;
    }
    return true;
}

template <typename T>
void RescaleTensor<T>::check_broadcast(std::size_t rows, std::size_t cols) const {
    if (alpha.size() != cols && alpha.size() != 1) {
        throw ShapeError("rescale alpha has " + std::to_string(alpha.size()) +
                         " factors for " + std::to_string(cols) + " channels");
    }
    if (kind == RescaleKind::rank1_per_mode) {
        const std::size_t hw = beta.size() * gamma.size();
        if (hw == 0 || rows % hw != 0) {
            throw ShapeError("rank-1 rescale (" + std::to_string(beta.size()) + " x " +
                             std::to_string(gamma.size()) + ") does not tile " +
                             std::to_string(rows) + " rows");
        }
    }
}

template <typename T>
Tensor<T> sign_quantize(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T v = x[i];
        if (!std::isfinite(v)) throw ValueError("sign_quantize: non-finite input at " + std::to_string(i));
        out[i] = v >= T(0) ? T(1) : T(-1);
    }
    return out;
}

template <typename T>
BitMatrix pack_signs(const T* data, std::size_t rows, std::size_t cols) {
    BitMatrix out(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        auto words = out.row_words(r);
        const T* src = data + r * cols;
        for (std::size_t w = 0; w < words.size(); ++w) {
            const std::size_t base = w * BitMatrix::kWordBits;
            const std::size_t n = std::min(BitMatrix::kWordBits, cols - base);
            std::uint64_t word = 0;
            for (std::size_t b = 0; b < n; ++b) {
                word |= static_cast<std::uint64_t>(src[base + b] >= T(0)) << b;
            }
            words[w] = word;
        }
    }
    return out;
}

template <typename T>
BitMatrix pack(const Tensor<T>& x) {
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] != T(1) && x[i] != T(-1)) {
            throw ValueError("pack: element " + std::to_string(i) + " is not in {-1,+1}");
        }
    }
    return pack_signs(x.data(), x.rows(), x.cols());
}

template <typename T>
Tensor<T> unpack(const BitMatrix& b) {
    Tensor<T> out = Tensor<T>::matrix(b.rows(), b.dim());
    for (std::size_t r = 0; r < b.rows(); ++r) {
        for (std::size_t k = 0; k < b.dim(); ++k) out.at(r, k) = b.bit(r, k) ? T(1) : T(-1);
    }
    return out;
}

namespace {
void check_same_dim(const BitRow& a, const BitRow& b, const char* op) {
    if (a.dim != b.dim || a.words.size() != b.words.size()) {
        throw ShapeError(std::string(op) + ": dimension mismatch " + std::to_string(a.dim) +
                         " vs " + std::to_string(b.dim));
    }
}
}  // namespace

std::int64_t hamming_distance(const BitRow& a, const BitRow& b) {
    check_same_dim(a, b, "hamming_distance");
    // Padding bits are zero in both operands and never survive the xor.
    return xor_popcount(a.words.data(), b.words.data(), a.words.size());
}

std::int64_t xnor_dot(const BitRow& a, const BitRow& b) {
    check_same_dim(a, b, "xnor_dot");
    const auto h = xor_popcount(a.words.data(), b.words.data(), a.words.size());
    return static_cast<std::int64_t>(a.dim) - 2 * h;
}

IntMatrix binary_gemm_int(const BitMatrix& a, const BitMatrix& bt) {
    if (a.dim() != bt.dim()) {
        throw ShapeError("binary_gemm: inner dimension mismatch " + std::to_string(a.dim()) +
                         " vs " + std::to_string(bt.dim()));
    }
    const std::size_t m = a.rows();
    const std::size_t n = bt.rows();
    const std::size_t words = a.words_per_row();
    const auto d = static_cast<std::int32_t>(a.dim());
    IntMatrix out({m, n});
    const std::uint64_t* aw = a.words().data();
    const std::uint64_t* bw = bt.words().data();
    std::int32_t* o = out.data();
#pragma omp parallel for schedule(static) if (m * n * words > (1u << 16))
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(m); ++ii) {
        const std::size_t i = static_cast<std::size_t>(ii);
        const std::uint64_t* ar = aw + i * words;
        std::int32_t* orow = o + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            orow[j] = d - 2 * static_cast<std::int32_t>(xor_popcount(ar, bw + j * words, words));
        }
    }
    return out;
}

template <typename T>
Tensor<T> binary_gemm(const BitMatrix& a, const BitMatrix& bt, const RescaleTensor<T>& gamma) {
    IntMatrix raw = binary_gemm_int(a, bt);
    const std::size_t m = raw.rows();
    const std::size_t n = bt.rows();
    gamma.check_broadcast(m, n);
    Tensor<T> out = Tensor<T>::matrix(m, n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out.at(i, j) = static_cast<T>(raw.at(i, j)) * gamma.factor(i, j);
        }
    }
    return out;
}

IntMatrix pairwise_hamming(const BitMatrix& x) {
    const std::size_t n = x.rows();
    const std::size_t words = x.words_per_row();
    IntMatrix out({n, n});
    const std::uint64_t* w = x.words().data();
    std::int32_t* o = out.data();
#pragma omp parallel for schedule(static) if (n * n * words > (1u << 16))
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
        const std::size_t i = static_cast<std::size_t>(ii);
        const std::uint64_t* xi = w + i * words;
        std::int32_t* orow = o + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            orow[j] = static_cast<std::int32_t>(xor_popcount(xi, w + j * words, words));
        }
    }
    return out;
}

template <typename T>
Tensor<T> pairwise_sq_l2(const Tensor<T>& x) {
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    std::vector<T> xt(d * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < d; ++p) xt[p * n + i] = x.at(i, p);
    Tensor<T> out = Tensor<T>::matrix(n, n);
    T* o = out.data();
#pragma omp parallel for schedule(static) if (n * n * d > (1u << 16))
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
        const std::size_t i = static_cast<std::size_t>(ii);
        T* orow = o + i * n;
        const T* xi = x.data() + i * d;
        for (std::size_t p = 0; p < d; ++p) {
            const T v = xi[p];
            const T* col = xt.data() + p * n;
#pragma GCC ivdep
            for (std::size_t j = 0; j < n; ++j) {
                const T diff = v - col[j];
                orow[j] += diff * diff;
            }
        }
    }
    return out;
}

template struct RescaleTensor<float>;
template struct RescaleTensor<double>;
template Tensor<float> sign_quantize(const Tensor<float>&);
template Tensor<double> sign_quantize(const Tensor<double>&);
template BitMatrix pack(const Tensor<float>&);
template BitMatrix pack(const Tensor<double>&);
template BitMatrix pack_signs(const float*, std::size_t, std::size_t);
template BitMatrix pack_signs(const double*, std::size_t, std::size_t);
template Tensor<float> unpack<float>(const BitMatrix&);
template Tensor<double> unpack<double>(const BitMatrix&);
template Tensor<float> binary_gemm(const BitMatrix&, const BitMatrix&, const RescaleTensor<float>&);
template Tensor<double> binary_gemm(const BitMatrix&, const BitMatrix&, const RescaleTensor<double>&);
template Tensor<float> pairwise_sq_l2(const Tensor<float>&);
template Tensor<double> pairwise_sq_l2(const Tensor<double>&);

}  // namespace bgnn
