#include <doctest.h>

#include "bgnn/ops.hpp"
#include "support.hpp"

using namespace bgnn;
using test::random_normal;
using test::random_pm1;

namespace {

using Mat = Tensor<double>;

void randomize_bn(BatchNormBlock<double>& b, std::mt19937_64& rng) {
    if (b.empty()) return;
    std::uniform_real_distribution<double> u(0.5, 1.5);
    std::normal_distribution<double> n(0.0, 0.3);
    for (auto& v : b.scale.value.storage()) v = u(rng);
    for (auto& v : b.shift.value.storage()) v = n(rng);
    for (auto& v : b.state.running_mean.storage()) v = n(rng);
    for (auto& v : b.state.running_var.storage()) v = u(rng);
}

void randomize(LayerParams<double>& p, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    for (auto* q : {&p.alpha, &p.beta, &p.gamma, &p.bias})
        for (auto& v : q->value.storage()) v = n(rng);
    if (!p.prelu_slope.empty()) p.prelu_slope.value[0] = 0.1 + 0.3 * std::abs(n(rng));
    randomize_bn(p.bn_node, rng);
    randomize_bn(p.bn_edge, rng);
    randomize_bn(p.bn_out, rng);
}

LayerParams<double> random_layer(LayerKind kind, std::size_t in, std::size_t out, Activation act,
                          std::mt19937_64& rng, RescaleKind rk = RescaleKind::channel_wise,
                          std::size_t points = 0, std::size_t k = 0, bool binary_out = false) {
    LayerFlags f;
    f.activation = act;
    f.binary_outputs = binary_out;
    auto p = make_layer<double>(kind, in, out, f, rk, points, k, false, rng);
    randomize(p, rng);
    return p;
}

double bn_eval(const BatchNormBlock<double>& b, std::size_t c, double v) {
    return (v - b.state.running_mean[c]) / std::sqrt(b.state.running_var[c] + b.state.epsilon) *
               b.scale.value[c] +
           b.shift.value[c];
}

double sgn(double v) { return v >= 0.0 ? 1.0 : -1.0; }

double act(const LayerParams<double>& p, double v) {
    switch (p.flags.activation) {
        case Activation::prelu: return v >= 0.0 ? v : p.prelu_slope.value[0] * v;
        case Activation::relu: return std::max(v, 0.0);
        case Activation::none: return v;
    }
    return v;
}

double gamma_of(const LayerParams<double>& p, std::size_t row, std::size_t c) {
    return p.rescale().factor(row, c);
}

/// Edge message of slot s of node i, before activation, for edge-style layers.
/// `node` and `edge` return the (already transformed) input halves.
template <typename NodeFn, typename EdgeFn, typename WFn>
double message(const LayerParams<double>& p, std::size_t i, std::size_t j, std::size_t o,
               NodeFn node, EdgeFn edge, WFn w) {
    const std::size_t d = p.in_dim;
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += w(o, c) * node(i, c) + w(o, d + c) * edge(i, j, c);
    return s;
}

Mat edgeconv_oracle(const Mat& x, const GraphTopology& topo, const LayerParams<double>& p) {
    const std::size_t n = x.rows(), k = topo.k(), o = p.out_dim;
    Mat out = Mat::matrix(n, o);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < o; ++c) {
            double best = -1e300;
            for (std::size_t s = 0; s < k; ++s) {
                const std::size_t j = topo.neighbour(i, s);
                double m = message(
                    p, i, j, c, [&](std::size_t a, std::size_t q) { return x.at(a, q); },
                    [&](std::size_t a, std::size_t b, std::size_t q) { return x.at(b, q) - x.at(a, q); },
                    [&](std::size_t r, std::size_t q) { return p.weight.value.at(r, q); });
                m = act(p, bn_eval(p.bn_out, c, m));
                best = std::max(best, m);
            }
            out.at(i, c) = best;
        }
    return out;
}

Mat binedgeconv_oracle(const Mat& x, const GraphTopology& topo, const LayerParams<double>& p) {
    const std::size_t n = x.rows(), k = topo.k(), o = p.out_dim;
    Mat out = Mat::matrix(n, o);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < o; ++c) {
            double best = -1e300;
            for (std::size_t s = 0; s < k; ++s) {
                const std::size_t j = topo.neighbour(i, s);
                const double dot = message(
                    p, i, j, c, [&](std::size_t a, std::size_t q) { return sgn(bn_eval(p.bn_node, q, x.at(a, q))); },
                    [&](std::size_t a, std::size_t b, std::size_t q) {
                        return sgn(bn_eval(p.bn_edge, q, x.at(b, q) - x.at(a, q)));
                    },
                    [&](std::size_t r, std::size_t q) { return sgn(p.weight.value.at(r, q)); });
                best = std::max(best, act(p, dot * gamma_of(p, i * k + s, c)));
            }
            out.at(i, c) = p.flags.binary_outputs ? sgn(bn_eval(p.bn_out, c, best)) : best;
        }
    return out;
}

Mat xor_oracle(const Mat& x, const GraphTopology& topo, const LayerParams<double>& p) {
    const std::size_t n = x.rows(), k = topo.k(), o = p.out_dim;
    const bool bf1 = p.kind == LayerKind::xoredgeconv_bf1;
    Mat out = Mat::matrix(n, o);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < o; ++c) {
            double best = -1e300;
            for (std::size_t s = 0; s < k; ++s) {
                const std::size_t j = topo.neighbour(i, s);
                const double dot = message(
                    p, i, j, c, [&](std::size_t a, std::size_t q) { return x.at(a, q); },
                    [&](std::size_t a, std::size_t b, std::size_t q) { return -x.at(a, q) * x.at(b, q); },
                    [&](std::size_t r, std::size_t q) { return sgn(p.weight.value.at(r, q)); });
                double m = act(p, dot * gamma_of(p, i * k + s, c));
                if (!bf1) m = bn_eval(p.bn_out, c, m);
                best = std::max(best, m);
            }
            out.at(i, c) = sgn(bf1 ? bn_eval(p.bn_out, c, best) : best);
        }
    return out;
}

Mat sage_oracle(const Mat& x, const GraphTopology& topo, const LayerParams<double>& p, bool binary) {
    const std::size_t n = x.rows(), d = p.in_dim, o = p.out_dim, k = topo.k();
    Mat out = Mat::matrix(n, o);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> mean(d, 0.0);
        for (std::size_t s = 0; s < k; ++s)
            for (std::size_t c = 0; c < d; ++c) mean[c] += x.at(topo.neighbour(i, s), c) / static_cast<double>(k);
        double norm = 0.0;
        for (std::size_t r = 0; r < o; ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                double a = x.at(i, c), b = mean[c], w1 = p.weight.value.at(r, c), w2 = p.weight.value.at(r, d + c);
                if (binary) {
                    a = sgn(bn_eval(p.bn_node, c, a));
                    b = sgn(bn_eval(p.bn_edge, c, b));
                    w1 = sgn(w1);
                    w2 = sgn(w2);
                }
                acc += w1 * a + w2 * b;
            }
            if (binary) acc *= gamma_of(p, i, r);
            out.at(i, r) = act(p, acc);
            norm += out.at(i, r) * out.at(i, r);
        }
        if (norm > 0.0)
            for (std::size_t r = 0; r < o; ++r) out.at(i, r) /= std::sqrt(norm);
    }
    return out;
}

void check_close(const Mat& a, const Mat& b, double tol = 1e-10) {
    REQUIRE(a.shape() == b.shape());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    CHECK(worst <= tol);
}

Tensor<double> run(LayerParams<double>& p, const Mat& x, const GraphTopology& topo, bool binary,
                   bool packed, bool training = false) {
    Tape<double> t(false);
    LayerContext<double> ctx;
    ctx.training = training;
    ctx.act_quant = binary ? Quantizer::sign : Quantizer::identity;
    ctx.weight_quant = binary ? Quantizer::sign : Quantizer::identity;
    ctx.allow_packed = packed;
    return t.value(layer::graph_forward(t, t.constant(x), topo, p, ctx));
}

GraphTopology permute_slots(const GraphTopology& g, std::mt19937_64& rng) {
    std::vector<std::uint32_t> idx = g.indices();
    for (std::size_t i = 0; i < g.nodes(); ++i)
        std::shuffle(idx.begin() + static_cast<std::ptrdiff_t>(i * g.k()),
                     idx.begin() + static_cast<std::ptrdiff_t>((i + 1) * g.k()), rng);
    return GraphTopology(g.nodes(), g.k(), std::move(idx));
}

}  // namespace

TEST_CASE("prelu examples") {
    std::mt19937_64 rng(51);
    const auto x = random_normal<double>({7, 3}, rng);
    const auto relu = prelu(x, 0.0);
    const auto id = prelu(x, 1.0);
    const auto p = prelu(x, 0.2);
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(relu[i] == std::max(x[i], 0.0));
        CHECK(id[i] == x[i]);
        CHECK(p[i] == (x[i] >= 0 ? x[i] : 0.2 * x[i]));
    }
}

TEST_CASE("float EdgeConv equals the per-edge oracle") {
    std::mt19937_64 rng(52);
    const auto x = random_normal<double>({20, 3}, rng);
    const auto topo = knn_l2(x, 4);
    auto p = random_layer(LayerKind::edgeconv, 3, 6, Activation::relu, rng);
    check_close(edgeconv_float(x, topo, p), edgeconv_oracle(x, topo, p));
}

TEST_CASE("binary EdgeConv equals the sign/real-arithmetic emulation") {
    std::mt19937_64 rng(53);
    for (auto rk : {RescaleKind::channel_wise, RescaleKind::rank1_per_mode})
        for (bool bout : {false, true}) {
            const std::size_t n = 16, k = 5;
            const auto x = random_normal<double>({n, 7}, rng);
            const auto topo = knn_l2(x, k);
            auto p = random_layer(LayerKind::binedgeconv, 7, 9, Activation::prelu, rng, rk, n, k, bout);
            const auto packed = run(p, x, topo, true, true);
            CHECK(packed == run(p, x, topo, true, false));
            check_close(packed, binedgeconv_oracle(x, topo, p));
            CHECK(binedgeconv(x, topo, p) == packed);
        }
}

TEST_CASE("XorEdgeConv BF1 and BF2 equal their emulation") {
    std::mt19937_64 rng(54);
    for (auto kind : {LayerKind::xoredgeconv_bf1, LayerKind::xoredgeconv_bf2})
        for (auto rk : {RescaleKind::channel_wise, RescaleKind::rank1_per_mode}) {
            const std::size_t n = 24, k = 6;
            const auto x = random_pm1<double>(n, 70, rng);
            const auto topo = knn_hamming(pack(x), k);
            auto p = random_layer(kind, 70, 33, Activation::prelu, rng, rk, n, k);
            const auto packed = run(p, x, topo, true, true);
            CHECK(packed == run(p, x, topo, true, false));
            CHECK(packed == xor_oracle(x, topo, p));
        }
}

TEST_CASE("BF1 equals BF2 when batch norm is the identity") {
    std::mt19937_64 rng(55);
    const std::size_t n = 30, k = 5;
    const auto x = random_pm1(n, 40, rng);
    const auto topo = knn_hamming(pack(x), k);
    LayerFlags f;
    f.activation = Activation::prelu;
    std::mt19937_64 r1(9), r2(9);
    auto p1 = make_layer<float>(LayerKind::xoredgeconv_bf1, 40, 24, f, RescaleKind::channel_wise, 0, 0, false, r1);
    auto p2 = make_layer<float>(LayerKind::xoredgeconv_bf2, 40, 24, f, RescaleKind::channel_wise, 0, 0, false, r2);
    std::normal_distribution<float> nd(0.f, 1.f);
    for (std::size_t c = 0; c < 24; ++c) p1.alpha.value[c] = p2.alpha.value[c] = nd(rng);
    CHECK(xoredgeconv(pack(x), topo, p1) == xoredgeconv(pack(x), topo, p2));
}

TEST_CASE("stacked XorEdgeConv layers stay in {-1,+1}") {
    std::mt19937_64 rng(56);
    const std::size_t n = 32, k = 6, d = 48;
    Tensor<float> x = random_pm1(n, d, rng);
    for (int l = 0; l < 4; ++l) {
        auto kind = l % 2 ? LayerKind::xoredgeconv_bf2 : LayerKind::xoredgeconv_bf1;
        LayerFlags f;
        f.activation = Activation::prelu;
        auto p = make_layer<float>(kind, d, d, f, RescaleKind::channel_wise, 0, 0, false, rng);
        const auto topo = knn_hamming(pack(x), k);
        Tape<float> t(false);
        LayerContext<float> ctx;
        ctx.training = true;
        ctx.act_quant = ctx.weight_quant = Quantizer::sign;
        x = t.value(layer::graph_forward(t, t.constant(x), topo, p, ctx));
        for (float v : x.storage()) REQUIRE((v == 1.f || v == -1.f));
    }
}

TEST_CASE("xoredgeconv on packed codes") {
    std::mt19937_64 rng(57);
    const auto x = random_pm1(20, 64, rng);
    LayerFlags f;
    f.activation = Activation::prelu;
    auto p = make_layer<float>(LayerKind::xoredgeconv_bf1, 64, 10, f, RescaleKind::channel_wise, 0, 0, false, rng);
    const auto topo = knn_hamming(pack(x), 3);
    const BitMatrix out = xoredgeconv(pack(x), topo, p);
    CHECK(out.rows() == 20);
    CHECK(out.dim() == 10);
    CHECK(out.padding_is_zero());
    auto e = make_layer<float>(LayerKind::edgeconv, 64, 10, f, RescaleKind::channel_wise, 0, 0, false, rng);
    CHECK_THROWS_AS(xoredgeconv(pack(x), topo, e), ConfigError);
}

TEST_CASE("max and mean aggregations ignore neighbour order") {
    std::mt19937_64 rng(58);
    const std::size_t n = 18, k = 5;
    const auto x = random_normal<double>({n, 4}, rng);
    const auto topo = knn_l2(x, k);
    const auto perm = permute_slots(topo, rng);
    auto ec = random_layer(LayerKind::edgeconv, 4, 6, Activation::relu, rng);
    CHECK(run(ec, x, topo, false, false) == run(ec, x, perm, false, false));
    auto be = random_layer(LayerKind::binedgeconv, 4, 6, Activation::prelu, rng);
    CHECK(run(be, x, topo, true, true) == run(be, x, perm, true, true));
    auto sg = random_layer(LayerKind::sage, 4, 6, Activation::relu, rng);
    check_close(run(sg, x, topo, false, false), run(sg, x, perm, false, false), 1e-14);

    const auto xb = random_pm1<double>(n, 16, rng);
    const auto tb = knn_hamming(pack(xb), k);
    auto xo = random_layer(LayerKind::xoredgeconv_bf2, 16, 8, Activation::prelu, rng);
    CHECK(run(xo, xb, tb, true, true) == run(xo, xb, permute_slots(tb, rng), true, true));
}

TEST_CASE("SAGE and binary SAGE equal their oracles") {
    std::mt19937_64 rng(59);
    const auto x = random_normal<double>({15, 5}, rng);
    const auto topo = knn_l2(x, 3);
    auto s = random_layer(LayerKind::sage, 5, 4, Activation::relu, rng);
    check_close(sage_float(x, topo, s), sage_oracle(x, topo, s, false));
    auto b = random_layer(LayerKind::binsage, 5, 4, Activation::prelu, rng);
    check_close(binsage(x, topo, b), sage_oracle(x, topo, b, true));
    CHECK(run(b, x, topo, true, true) == run(b, x, topo, true, false));
}

TEST_CASE("SAGE with an empty neighbourhood aggregates zeros") {
    std::mt19937_64 rng(60);
    const auto x = random_normal<double>({4, 3}, rng);
    const GraphTopology none(4, 0, {});
    auto s = random_layer(LayerKind::sage, 3, 2, Activation::none, rng);
    check_close(sage_float(x, none, s), sage_oracle(x, none, s, false));
}

TEST_CASE("binary dense layer: packed product equals the float emulation") {
    std::mt19937_64 rng(61);
    auto p = random_layer(LayerKind::binary_dense, 33, 12, Activation::prelu, rng);
    const auto x = random_normal<double>({6, 33}, rng);
    Mat want = Mat::matrix(6, 12);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t o = 0; o < 12; ++o) {
            double s = 0.0;
            for (std::size_t c = 0; c < 33; ++c)
                s += sgn(p.weight.value.at(o, c)) * sgn(bn_eval(p.bn_node, c, x.at(i, c)));
            want.at(i, o) = act(p, s * p.alpha.value[o]);
        }
    for (bool packed : {true, false}) {
        Tape<double> t(false);
        LayerContext<double> ctx;
        ctx.act_quant = ctx.weight_quant = Quantizer::sign;
        ctx.allow_packed = packed;
        check_close(t.value(layer::dense_forward(t, t.constant(x), p, ctx)), want);
    }
}

TEST_CASE("balance wrapper subtracts the per-channel statistic") {
    const auto x = Tensor<double>::from_rows({{1, 4}, {3, 8}});
    CHECK(balance(x, BalanceMode::mean) == Tensor<double>::from_rows({{-1, -2}, {1, 2}}));
    CHECK(balance(x, BalanceMode::mean, BalanceAxis::feature) ==
          Tensor<double>::from_rows({{-1.5, 1.5}, {-2.5, 2.5}}));
    CHECK(balance(x, BalanceMode::none) == x);
}

TEST_CASE("global pooling and classifier") {
    std::mt19937_64 rng(62);
    const std::size_t g = 3, n = 5, d = 4;
    const auto x = random_normal<double>({g * n, d}, rng);
    LayerFlags f;
    f.activation = Activation::none;
    auto head = make_layer<double>(LayerKind::dense, 2 * d, 3, f, RescaleKind::channel_wise, 0, 0, true, rng);
    for (auto& v : head.bias.value.storage()) v = 0.5;
    std::vector<LayerParams<double>> mlp{head};
    LayerContext<double> ctx;
    const auto logits = global_pool_classify(x, n, mlp, ctx);
    for (std::size_t b = 0; b < g; ++b)
        for (std::size_t o = 0; o < 3; ++o) {
            double s = 0.5;
            for (std::size_t c = 0; c < d; ++c) {
                double mx = -1e300, mean = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    mx = std::max(mx, x.at(b * n + i, c));
                    mean += x.at(b * n + i, c) / n;
                }
                s += head.weight.value.at(o, c) * mx + head.weight.value.at(o, d + c) * mean;
            }
            CHECK(logits.at(b, o) == doctest::Approx(s).epsilon(1e-12));
        }
}

TEST_CASE("batch norm wrapper in evaluation form") {
    std::mt19937_64 rng(63);
    BatchNormBlock<double> b(3);
    randomize_bn(b, rng);
    const auto x = random_normal<double>({4, 3}, rng);
    const auto y = batch_norm(x, b, false);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t c = 0; c < 3; ++c) CHECK(y.at(i, c) == doctest::Approx(bn_eval(b, c, x.at(i, c))));
}

TEST_CASE("make_layer parameter shapes") {
    std::mt19937_64 rng(64);
    LayerFlags f;
    f.activation = Activation::prelu;
    auto b = make_layer<float>(LayerKind::binedgeconv, 3, 8, f, RescaleKind::rank1_per_mode, 16, 4, false, rng);
    CHECK(b.weight.value.shape() == std::vector<std::size_t>{8, 6});
    CHECK(b.alpha.value.size() == 8);
    CHECK(b.beta.value.size() == 16);
    CHECK(b.gamma.value.size() == 4);
    CHECK(b.bn_node.channels() == 3);
    CHECK(b.bn_out.empty());
    CHECK(b.prelu_slope.value[0] == 0.25f);
    for (float v : b.weight.value.storage()) CHECK(std::abs(v) <= 1.f);
    CHECK_THROWS_AS(make_layer<float>(LayerKind::binedgeconv, 3, 8, f, RescaleKind::rank1_per_mode, 0, 0, false, rng),
                    ConfigError);
    CHECK_THROWS_AS(make_layer<float>(LayerKind::dense, 0, 8, f, RescaleKind::channel_wise, 0, 0, false, rng),
                    ConfigError);
}

TEST_CASE("layer kind names round-trip") {
    for (auto k : {LayerKind::edgeconv, LayerKind::binedgeconv, LayerKind::xoredgeconv_bf1,
                   LayerKind::xoredgeconv_bf2, LayerKind::sage, LayerKind::binsage, LayerKind::dense,
                   LayerKind::binary_dense})
        CHECK(parse_layer_kind(to_string(k)) == k);
    CHECK_THROWS_AS(parse_layer_kind("conv"), ConfigError);
    CHECK(parse_rescale("rank1") == RescaleKind::rank1_per_mode);
    CHECK(parse_quantizer("hardtanh") == Quantizer::hardtanh);
}

TEST_CASE("graph layers reject mismatched inputs") {
    std::mt19937_64 rng(65);
    auto p = random_layer(LayerKind::edgeconv, 3, 4, Activation::relu, rng);
    const auto x = random_normal<double>({10, 4}, rng);
    CHECK_THROWS_AS(edgeconv_float(x, knn_l2(x, 2), p), ShapeError);
    const auto y = random_normal<double>({10, 3}, rng);
    const auto other = knn_l2(random_normal<double>({12, 3}, rng), 2);
    CHECK_THROWS_AS(edgeconv_float(y, other, p), ShapeError);
}
