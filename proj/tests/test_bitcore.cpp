#include <doctest.h>

#include <limits>

#include "bgnn/bitcore.hpp"
#include "bgnn/gemm.hpp"
#include "support.hpp"

using namespace bgnn;
using bgnn::test::random_pm1;

TEST_CASE("sign_quantize maps zero to +1 and rejects non-finite input") {
    const auto q = sign_quantize(Tensor<float>::vector({-2.f, -0.f, 0.f, 1e-30f, -1e-30f, 3.f}));
    CHECK(q == Tensor<float>::vector({-1.f, 1.f, 1.f, 1.f, -1.f, 1.f}));
    CHECK_THROWS_AS(sign_quantize(Tensor<float>::vector({1.f, std::numeric_limits<float>::quiet_NaN()})),
                    ValueError);
    CHECK_THROWS_AS(sign_quantize(Tensor<double>::vector({std::numeric_limits<double>::infinity()})),
                    ValueError);
}

TEST_CASE("pack uses LSB-first words with a set bit for +1") {
    Tensor<float> x = Tensor<float>::matrix(1, 70, -1.f);
    x.at(0, 0) = 1.f;
    x.at(0, 3) = 1.f;
    x.at(0, 64) = 1.f;
    x.at(0, 69) = 1.f;
    const BitMatrix b = pack(x);
    REQUIRE(b.words_per_row() == 2);
    CHECK(b.words()[0] == 0b1001u);
    CHECK(b.words()[1] == ((1u << 0) | (1u << 5)));
    CHECK(b.padding_is_zero());
}

TEST_CASE("pack rejects values outside {-1,+1}") {
    CHECK_THROWS_AS(pack(Tensor<float>::from_rows({{1.f, 0.f}})), ValueError);
    CHECK_THROWS_AS(pack(Tensor<float>::from_rows({{1.f, 0.5f}})), ValueError);
}

TEST_CASE("from_words rejects padding bits and wrong word counts") {
    CHECK_THROWS_AS(BitMatrix::from_words(1, 3, {0b1000}), ValueError);
    CHECK_THROWS_AS(BitMatrix::from_words(2, 3, {0b111}), ShapeError);
    CHECK(BitMatrix::from_words(1, 3, {0b101}).value(0, 1) == -1);
}

TEST_CASE("unpack(pack(X)) == X with zero padding for every width") {
    std::mt19937_64 rng(11);
    for (std::size_t d = 1; d <= 200; ++d) {
        const auto x = random_pm1(3, d, rng);
        const BitMatrix b = pack(x);
        CHECK(b.padding_is_zero());
        CHECK(unpack<float>(b) == x);
        CHECK(b.words_per_row() == (d + 63) / 64);
    }
}

TEST_CASE("xnor_dot and hamming_distance agree with the elementwise sums") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t d = test::uniform(rng, 1, 700);
        const auto x = random_pm1(2, d, rng);
        const BitMatrix b = pack(x);
        std::int64_t dot = 0;
        for (std::size_t k = 0; k < d; ++k) dot += static_cast<std::int64_t>(x.at(0, k) * x.at(1, k));
        const auto xd = xnor_dot(b.row(0), b.row(1));
        const auto h = hamming_distance(b.row(0), b.row(1));
        CHECK(xd == dot);
        CHECK(h == test::hamming_pm1(x, 0, x, 1));
        CHECK((static_cast<std::int64_t>(d) - xd) % 2 == 0);
        CHECK(h == (static_cast<std::int64_t>(d) - xd) / 2);
    }
}

TEST_CASE("xnor_dot rejects mismatched dimensions") {
    BitMatrix a(1, 10), b(1, 11);
    CHECK_THROWS_AS(xnor_dot(a.row(0), b.row(0)), ShapeError);
    CHECK_THROWS_AS(hamming_distance(a.row(0), b.row(0)), ShapeError);
}

TEST_CASE("binary_gemm_int equals the integer product of the unpacked matrices") {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t m = test::uniform(rng, 1, 40), n = test::uniform(rng, 1, 40);
        const std::size_t d = test::uniform(rng, 1, 300);
        const auto a = random_pm1(m, d, rng);
        const auto bt = random_pm1(n, d, rng);
        const IntMatrix got = binary_gemm_int(pack(a), pack(bt));
        const auto want = test::gemm_pm1(a, bt);
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < want.size(); ++i) CHECK(got[i] == want[i]);
    }
}

TEST_CASE("binary_gemm applies channel-wise and rank-1 rescaling after the integer core") {
    std::mt19937_64 rng(14);
    const std::size_t h = 3, w = 4, m = h * w * 2, n = 5, d = 77;
    const auto a = random_pm1<double>(m, d, rng);
    const auto bt = random_pm1<double>(n, d, rng);
    const auto raw = test::gemm_pm1(a, bt);

    const auto ones = binary_gemm(pack(a), pack(bt), RescaleTensor<double>::ones(n));
    for (std::size_t i = 0; i < raw.size(); ++i) CHECK(ones[i] == static_cast<double>(raw[i]));

    const auto alpha = test::random_normal<double>({n}, rng);
    const auto beta = test::random_normal<double>({h}, rng);
    const auto gamma = test::random_normal<double>({w}, rng);
    const auto cw = binary_gemm(pack(a), pack(bt), RescaleTensor<double>::channel_wise(alpha));
    const auto r1 = binary_gemm(pack(a), pack(bt), RescaleTensor<double>::rank1(alpha, beta, gamma));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double v = static_cast<double>(raw[i * n + j]);
            CHECK(cw.at(i, j) == v * alpha[j]);
            CHECK(r1.at(i, j) == v * (alpha[j] * beta[(i / w) % h] * gamma[i % w]));
        }

    const auto single = binary_gemm(pack(a), pack(bt), RescaleTensor<double>::channel_wise(Tensor<double>::vector({2.0})));
    CHECK(single.at(1, 2) == 2.0 * static_cast<double>(raw[n + 2]));
}

TEST_CASE("binary_gemm rejects inconsistent shapes") {
    BitMatrix a(4, 10), b(3, 12), c(3, 10);
    CHECK_THROWS_AS(binary_gemm_int(a, b), ShapeError);
    CHECK_THROWS_AS(binary_gemm(a, c, RescaleTensor<float>::ones(2)), ShapeError);
    CHECK_THROWS_AS(binary_gemm(a, c, RescaleTensor<float>::rank1(Tensor<float>({3}, 1.f),
                                                                   Tensor<float>({3}, 1.f),
                                                                   Tensor<float>({1}, 1.f))),
                    ShapeError);
}

TEST_CASE("binary_gemm matches the float GEMM on +-1 operands") {
    std::mt19937_64 rng(15);
    const auto a = random_pm1(33, 130, rng);
    const auto bt = random_pm1(17, 130, rng);
    const auto f = gemm::matmul_nt(a, bt);
    const auto b = binary_gemm(pack(a), pack(bt), RescaleTensor<float>::ones(17));
    CHECK(f == b);
}

TEST_CASE("pairwise_hamming small cases") {
    const auto x = Tensor<float>::from_rows({{1, 1}, {1, -1}});
    const auto h = pairwise_hamming(pack(x));
    CHECK(h == IntMatrix({2, 2}, std::vector<std::int32_t>{0, 1, 1, 0}));
    const auto same = Tensor<float>::from_rows({{1, -1, 1}, {1, -1, 1}});
    CHECK(pairwise_hamming(pack(same)).at(0, 1) == 0);
}

TEST_CASE("pairwise_hamming equals the per-bit oracle and is a symmetric distance matrix") {
    std::mt19937_64 rng(16);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t n = test::uniform(rng, 1, 70), d = test::uniform(rng, 1, 300);
        const auto x = random_pm1(n, d, rng);
        const IntMatrix h = pairwise_hamming(pack(x));
        for (std::size_t i = 0; i < n; ++i) {
            CHECK(h.at(i, i) == 0);
            for (std::size_t j = 0; j < n; ++j) {
                CHECK(h.at(i, j) == test::hamming_pm1(x, i, x, j));
                CHECK(h.at(i, j) == h.at(j, i));
                CHECK(h.at(i, j) >= 0);
                CHECK(h.at(i, j) <= static_cast<std::int32_t>(d));
            }
        }
    }
}

TEST_CASE("pairwise_sq_l2 on +-1 codes is four times the Hamming distance") {
    std::mt19937_64 rng(17);
    const auto x = random_pm1(64, 256, rng);
    const auto l2 = pairwise_sq_l2(x);
    const auto h = pairwise_hamming(pack(x));
    for (std::size_t i = 0; i < l2.size(); ++i) CHECK(l2[i] == 4.f * static_cast<float>(h[i]));
}

TEST_CASE("pairwise_sq_l2 equals the direct sum") {
    std::mt19937_64 rng(18);
    const auto x = test::random_normal<double>({20, 9}, rng);
    const auto l2 = pairwise_sq_l2(x);
    for (std::size_t i = 0; i < 20; ++i)
        for (std::size_t j = 0; j < 20; ++j) CHECK(l2.at(i, j) == doctest::Approx(test::sq_l2(x, i, j)).epsilon(1e-12));
}

TEST_CASE("pack_signs binarizes arbitrary reals with zero as +1") {
    const std::vector<double> v{-0.5, 0.0, 2.0, -3.0};
    const BitMatrix b = pack_signs(v.data(), 2, 2);
    CHECK(unpack<double>(b) == Tensor<double>::from_rows({{-1, 1}, {1, -1}}));
}

TEST_CASE("float GEMM variants agree with the naive triple loop") {
    std::mt19937_64 rng(19);
    const std::size_t m = 7, n = 9, k = 13;
    const auto a = test::random_normal<double>({m, k}, rng);
    const auto b = test::random_normal<double>({k, n}, rng);
    const auto bt = test::random_normal<double>({n, k}, rng);
    const auto am = test::random_normal<double>({m, n}, rng);
    std::vector<double> c(m * n, 0.0), ct(m * n, 0.0), ctn(k * n, 0.0);
    gemm::nn(m, n, k, a.data(), b.data(), c.data());
    gemm::nt(m, n, k, a.data(), bt.data(), ct.data());
    gemm::tn(m, n, k, a.data(), am.data(), ctn.data());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0, st = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                s += a.at(i, p) * b.at(p, j);
                st += a.at(i, p) * bt.at(j, p);
            }
            CHECK(c[i * n + j] == doctest::Approx(s).epsilon(1e-12));
            CHECK(ct[i * n + j] == doctest::Approx(st).epsilon(1e-12));
        }
    for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < m; ++i) s += a.at(i, p) * am.at(i, j);
            CHECK(ctn[p * n + j] == doctest::Approx(s).epsilon(1e-12));
        }
    std::vector<double> acc(m * n, 1.0);
    gemm::nn(m, n, k, a.data(), b.data(), acc.data(), true);
    CHECK(acc[0] == doctest::Approx(c[0] + 1.0).epsilon(1e-12));
}
