#include "bgnn/ops.hpp"

#include <array>
#include <cmath>

namespace bgnn {

namespace {

template <typename E>
struct Names {
    E value;
    const char* name;
};

constexpr std::array<Names<LayerKind>, 8> kLayerNames{{
    {LayerKind::edgeconv, "edgeconv"},
    {LayerKind::binedgeconv, "binedgeconv"},
    {LayerKind::xoredgeconv_bf1, "xoredgeconv_bf1"},
    {LayerKind::xoredgeconv_bf2, "xoredgeconv_bf2"},
    {LayerKind::sage, "sage"},
    {LayerKind::binsage, "binsage"},
    {LayerKind::dense, "dense"},
    {LayerKind::binary_dense, "binary_dense"},
}};
constexpr std::array<Names<Activation>, 3> kActNames{{
    {Activation::prelu, "prelu"}, {Activation::relu, "relu"}, {Activation::none, "none"}}};
constexpr std::array<Names<BalanceMode>, 3> kBalanceNames{{
    {BalanceMode::none, "none"}, {BalanceMode::mean, "mean"}, {BalanceMode::median, "median"}}};
constexpr std::array<Names<Quantizer>, 4> kQuantNames{{{Quantizer::identity, "identity"},
                                                      {Quantizer::tanh, "tanh"},
                                                      {Quantizer::sign, "sign"},
                                                      {Quantizer::hardtanh, "hardtanh"}}};
constexpr std::array<Names<RescaleKind>, 2> kRescaleNames{
    {{RescaleKind::channel_wise, "channel"}, {RescaleKind::rank1_per_mode, "rank1"}}};

template <typename E, std::size_t N>
std::string name_of(const std::array<Names<E>, N>& table, E v) {
    for (const auto& e : table)
        if (e.value == v) return e.name;
    return "?";
}

template <typename E, std::size_t N>
E parse_name(const std::array<Names<E>, N>& table, const std::string& s, const char* what) {
    for (const auto& e : table)
        if (s == e.name) return e.value;
    std::string options;
    for (const auto& e : table) options += std::string(options.empty() ? "" : "|") + e.name;
    throw ConfigError(std::string("unknown ") + what + " '" + s + "' (expected " + options + ")");
}

}  // namespace

std::string to_string(LayerKind k) { return name_of(kLayerNames, k); }
std::string to_string(Activation a) { return name_of(kActNames, a); }
std::string to_string(BalanceMode m) { return name_of(kBalanceNames, m); }
std::string to_string(Quantizer q) { return name_of(kQuantNames, q); }
std::string to_string(RescaleKind r) { return name_of(kRescaleNames, r); }
LayerKind parse_layer_kind(const std::string& s) { return parse_name(kLayerNames, s, "layer kind"); }
Activation parse_activation(const std::string& s) { return parse_name(kActNames, s, "activation"); }
BalanceMode parse_balance(const std::string& s) { return parse_name(kBalanceNames, s, "balance mode"); }
Quantizer parse_quantizer(const std::string& s) { return parse_name(kQuantNames, s, "quantizer"); }
RescaleKind parse_rescale(const std::string& s) { return parse_name(kRescaleNames, s, "rescale kind"); }

bool is_graph_layer(LayerKind k) noexcept {
    return k != LayerKind::dense && k != LayerKind::binary_dense;
}

bool has_binary_weights(LayerKind k) noexcept {
    return k == LayerKind::binedgeconv || k == LayerKind::xoredgeconv_bf1 ||
           k == LayerKind::xoredgeconv_bf2 || k == LayerKind::binsage ||
           k == LayerKind::binary_dense;
}

bool is_xor(LayerKind k) noexcept {
    return k == LayerKind::xoredgeconv_bf1 || k == LayerKind::xoredgeconv_bf2;
}

template <typename T>
RescaleTensor<T> LayerParams<T>::rescale() const {
    if (rescale_kind == RescaleKind::rank1_per_mode)
        return RescaleTensor<T>::rank1(alpha.value, beta.value, gamma.value);
    return RescaleTensor<T>::channel_wise(alpha.value);
}

namespace {
template <typename U, typename T>
Parameter<U> cast_param(const Parameter<T>& p) {
    return p.empty() ? Parameter<U>() : Parameter<U>(p.value.template cast<U>());
}
template <typename U, typename T>
BatchNormBlock<U> cast_bn(const BatchNormBlock<T>& b) {
    BatchNormBlock<U> out;
    out.scale = cast_param<U>(b.scale);
    out.shift = cast_param<U>(b.shift);
    out.state.running_mean = b.state.running_mean.template cast<U>();
    out.state.running_var = b.state.running_var.template cast<U>();
    out.state.momentum = b.state.momentum;
    out.state.epsilon = b.state.epsilon;
    return out;
}
}  // namespace

template <typename T>
template <typename U>
LayerParams<U> LayerParams<T>::cast() const {
    LayerParams<U> o;
    o.kind = kind;
    o.flags = flags;
    o.in_dim = in_dim;
    o.out_dim = out_dim;
    o.weight = cast_param<U>(weight);
    o.bias = cast_param<U>(bias);
    o.rescale_kind = rescale_kind;
    o.alpha = cast_param<U>(alpha);
    o.beta = cast_param<U>(beta);
    o.gamma = cast_param<U>(gamma);
    o.bn_node = cast_bn<U>(bn_node);
    o.bn_edge = cast_bn<U>(bn_edge);
    o.bn_out = cast_bn<U>(bn_out);
    o.prelu_slope = cast_param<U>(prelu_slope);
    return o;
}

namespace layer {

template <typename T>
Var bn(Tape<T>& t, Var x, BatchNormBlock<T>& b, bool training) {
    if (b.empty()) return x;
    return ad::batch_norm(t, x, t.parameter(b.scale), t.parameter(b.shift), b.state, training);
}

template <typename T>
Var activate(Tape<T>& t, Var x, LayerParams<T>& p) {
    switch (p.flags.activation) {
        case Activation::prelu: return ad::prelu(t, x, t.parameter(p.prelu_slope));
        case Activation::relu: return ad::relu(t, x);
        case Activation::none: return x;
    }
    return x;
}

template <typename T>
Var apply_rescale(Tape<T>& t, Var y, LayerParams<T>& p) {
    if (p.alpha.empty()) return y;
    if (p.rescale_kind == RescaleKind::rank1_per_mode)
        return ad::rescale_rank1(t, y, t.parameter(p.alpha), t.parameter(p.beta),
                                 t.parameter(p.gamma));
    return ad::rescale(t, y, t.parameter(p.alpha));
}

namespace {

template <typename T>
void check_input(const Tape<T>& t, Var x, const LayerParams<T>& p, const GraphTopology& topo) {
    const auto& X = t.value(x);
    if (X.cols() != p.in_dim)
        throw ShapeError(to_string(p.kind) + ": expected " + std::to_string(p.in_dim) +
                         " input features, got " + std::to_string(X.cols()));
    if (topo.nodes() != X.rows() && !(topo.k() == 0 && p.kind == LayerKind::sage) &&
        !(topo.k() == 0 && p.kind == LayerKind::binsage))
        throw ShapeError(to_string(p.kind) + ": topology has " + std::to_string(topo.nodes()) +
                         " nodes, features have " + std::to_string(X.rows()));
}

/// Node half and edge half of [x_i | e_ij] multiplied by the two column blocks
/// of the (already quantized) weight, summed per edge.
template <typename T>
Var split_product(Tape<T>& t, Var nodes, Var edges, Var w, std::size_t d, std::size_t k,
                  bool packed) {
    Var w1 = ad::slice_cols(t, w, 0, d);
    Var w2 = ad::slice_cols(t, w, d, 2 * d);
    Var yn = ad::linear(t, nodes, w1, packed);
    Var ye = ad::linear(t, edges, w2, packed);
    return ad::add_node_to_edges(t, ye, yn, k);
}

template <typename T>
std::size_t group(const LayerContext<T>& ctx, std::size_t per_node) {
    return ctx.graph_size == 0 ? 0 : ctx.graph_size * per_node;
}

}  // namespace

template <typename T>
Var graph_forward(Tape<T>& t, Var x, const GraphTopology& topo, LayerParams<T>& p,
                  const LayerContext<T>& ctx) {
    check_input(t, x, p, topo);
    const std::size_t d = p.in_dim;
    const std::size_t k = topo.k();
    const BalanceMode eb = p.flags.edge_balance;
    switch (p.kind) {
        case LayerKind::edgeconv: {
            Var w = t.parameter(p.weight);
            Var y = split_product(t, x, ad::edge_diff(t, x, topo), w, d, k, false);
            y = bn(t, y, p.bn_out, ctx.training);
            y = activate(t, y, p);
            return ad::max_neighbours(t, y, k);
        }
        case LayerKind::binedgeconv: {
            Var xn = bn(t, x, p.bn_node, ctx.training);
            Var xe = bn(t, ad::edge_diff(t, x, topo), p.bn_edge, ctx.training);
            xn = ad::balance(t, xn, eb, BalanceAxis::channel, group(ctx, 1));
            xe = ad::balance(t, xe, eb, BalanceAxis::channel, group(ctx, k));
            xn = ad::quantize(t, xn, ctx.act_quant);
            xe = ad::quantize(t, xe, ctx.act_quant);
            Var w = ad::quantize(t, t.parameter(p.weight), ctx.weight_quant);
            Var y = split_product(t, xn, xe, w, d, k, ctx.packed());
            y = apply_rescale(t, y, p);
            y = activate(t, y, p);
            Var out = ad::max_neighbours(t, y, k);
            if (!p.flags.binary_outputs) return out;
            out = bn(t, out, p.bn_out, ctx.training);
            out = ad::balance(t, out, eb, BalanceAxis::channel, group(ctx, 1));
            return ad::quantize(t, out, ctx.act_quant);
        }
        case LayerKind::xoredgeconv_bf1:
        case LayerKind::xoredgeconv_bf2: {
            Var w = ad::quantize(t, t.parameter(p.weight), ctx.weight_quant);
            Var y = split_product(t, x, ad::edge_xor(t, x, topo), w, d, k, ctx.packed());
            y = apply_rescale(t, y, p);
            y = activate(t, y, p);
            Var out;
            if (p.kind == LayerKind::xoredgeconv_bf1) {
                out = ad::max_neighbours(t, y, k);
                out = bn(t, out, p.bn_out, ctx.training);
                out = ad::balance(t, out, eb, BalanceAxis::channel, group(ctx, 1));
            } else {
                y = bn(t, y, p.bn_out, ctx.training);
                y = ad::balance(t, y, eb, BalanceAxis::channel, group(ctx, k));
                out = ad::max_neighbours(t, y, k);
            }
            return ad::quantize(t, out, ctx.act_quant);
        }
        case LayerKind::sage: {
            Var agg = ad::mean_neighbours(t, x, topo);
            std::array<Var, 2> parts{x, agg};
            Var h = ad::concat_cols(t, std::span<const Var>(parts));
            Var y = ad::linear(t, h, t.parameter(p.weight));
            y = activate(t, y, p);
            return ad::l2_normalize_rows(t, y);
        }
        case LayerKind::binsage: {
            Var agg = ad::mean_neighbours(t, x, topo);
            Var hn = bn(t, x, p.bn_node, ctx.training);
            Var ha = bn(t, agg, p.bn_edge, ctx.training);
            hn = ad::quantize(t, ad::balance(t, hn, eb, BalanceAxis::channel, group(ctx, 1)),
                              ctx.act_quant);
            ha = ad::quantize(t, ad::balance(t, ha, eb, BalanceAxis::channel, group(ctx, 1)),
                              ctx.act_quant);
            Var w = ad::quantize(t, t.parameter(p.weight), ctx.weight_quant);
            Var w1 = ad::slice_cols(t, w, 0, d);
            Var w2 = ad::slice_cols(t, w, d, 2 * d);
            Var y = ad::add(t, ad::linear(t, hn, w1, ctx.packed()),
                            ad::linear(t, ha, w2, ctx.packed()));
            y = apply_rescale(t, y, p);
            y = activate(t, y, p);
            return ad::l2_normalize_rows(t, y);
        }
        case LayerKind::dense:
        case LayerKind::binary_dense:
            break;
    }
    throw ConfigError(to_string(p.kind) + " is not a graph layer");
}

template <typename T>
Var dense_forward(Tape<T>& t, Var x, LayerParams<T>& p, const LayerContext<T>& ctx,
                  bool binarize_input) {
    const auto& X = t.value(x);
    if (X.cols() != p.in_dim)
        throw ShapeError(to_string(p.kind) + ": expected " + std::to_string(p.in_dim) +
                         " input features, got " + std::to_string(X.cols()));
    if (p.kind == LayerKind::binary_dense) {
        Var h = bn(t, x, p.bn_node, ctx.training);
        h = ad::balance(t, h, ctx.global_balance, BalanceAxis::feature);
        h = ad::quantize(t, h, ctx.act_quant);
        Var w = ad::quantize(t, t.parameter(p.weight), ctx.weight_quant);
        Var y = ad::linear(t, h, w, ctx.packed());
        y = apply_rescale(t, y, p);
        return activate(t, y, p);
    }
    if (p.kind != LayerKind::dense) throw ConfigError(to_string(p.kind) + " is not a dense layer");
    Var h = x;
    if (binarize_input) {
        h = bn(t, h, p.bn_node, ctx.training);
        h = ad::balance(t, h, ctx.global_balance, BalanceAxis::feature);
        h = ad::quantize(t, h, ctx.act_quant);
    }
    Var y = ad::linear(t, h, t.parameter(p.weight));
    if (!p.bias.empty()) y = ad::add_bias(t, y, t.parameter(p.bias));
    y = bn(t, y, p.bn_out, ctx.training);
    return activate(t, y, p);
}

}  // namespace layer

namespace {

template <typename T>
LayerContext<T> eval_context(bool training, bool binary) {
    LayerContext<T> ctx;
    ctx.training = training;
    ctx.act_quant = binary ? Quantizer::sign : Quantizer::identity;
    ctx.weight_quant = binary ? Quantizer::sign : Quantizer::identity;
    return ctx;
}

template <typename T>
Tensor<T> run_graph_layer(const Tensor<T>& x, const GraphTopology& topo, LayerParams<T>& p,
                          bool training, bool binary) {
    Tape<T> t(false);
    Var in = t.constant(x);
    Var out = layer::graph_forward(t, in, topo, p, eval_context<T>(training, binary));
    return t.value(out);
}

void require_kind(bool ok, const char* op, LayerKind got) {
    if (!ok) throw ConfigError(std::string(op) + ": layer kind " + to_string(got) + " not accepted");
}

}  // namespace

template <typename T>
Tensor<T> edgeconv_float(const Tensor<T>& x, const GraphTopology& topo, LayerParams<T>& p) {
    require_kind(p.kind == LayerKind::edgeconv, "edgeconv_float", p.kind);
    return run_graph_layer(x, topo, p, false, false);
}

template <typename T>
Tensor<T> binedgeconv(const Tensor<T>& x, const GraphTopology& topo, LayerParams<T>& p,
                      bool training) {
    require_kind(p.kind == LayerKind::binedgeconv, "binedgeconv", p.kind);
    return run_graph_layer(x, topo, p, training, true);
}

BitMatrix xoredgeconv(const BitMatrix& x, const GraphTopology& topo, LayerParams<float>& p,
                      bool training) {
    require_kind(is_xor(p.kind), "xoredgeconv", p.kind);
    if (!p.flags.binary_outputs || !p.flags.binary_inputs)
        throw ConfigError("xoredgeconv: layer flags must request binary inputs and outputs");
    const Tensor<float> out = run_graph_layer(unpack<float>(x), topo, p, training, true);
    return pack(out);
}

template <typename T>
Tensor<T> sage_float(const Tensor<T>& x, const GraphTopology& topo, LayerParams<T>& p) {
    require_kind(p.kind == LayerKind::sage, "sage_float", p.kind);
    return run_graph_layer(x, topo, p, false, false);
}

template <typename T>
Tensor<T> binsage(const Tensor<T>& x, const GraphTopology& topo, LayerParams<T>& p,
                  bool training) {
    require_kind(p.kind == LayerKind::binsage, "binsage", p.kind);
    return run_graph_layer(x, topo, p, training, true);
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, BatchNormBlock<T>& b, bool training) {
    Tape<T> t(false);
    return t.value(layer::bn(t, t.constant(x), b, training));
}

template <typename T>
Tensor<T> balance(const Tensor<T>& x, BalanceMode mode, BalanceAxis axis) {
    Tape<T> t(false);
    return t.value(ad::balance(t, t.constant(x), mode, axis));
}

template <typename T>
Tensor<T> prelu(const Tensor<T>& x, T slope) {
    Tape<T> t(false);
    Var s = t.constant(Tensor<T>({1}, slope));
    return t.value(ad::prelu(t, t.constant(x), s));
}

template <typename T>
Tensor<T> global_pool_classify(const Tensor<T>& node_embeddings, std::size_t graph_size,
                               std::vector<LayerParams<T>>& mlp, const LayerContext<T>& ctx) {
    if (mlp.empty()) throw ConfigError("global_pool_classify: no classifier layers");
    Tape<T> t(false);
    Var x = t.constant(node_embeddings);
    std::array<Var, 2> pooled{ad::global_max_pool(t, x, graph_size),
                              ad::global_avg_pool(t, x, graph_size)};
    Var h = ad::concat_cols(t, std::span<const Var>(pooled));
    for (std::size_t i = 0; i + 1 < mlp.size(); ++i) h = layer::dense_forward(t, h, mlp[i], ctx);
    auto& head = mlp.back();
    return t.value(layer::dense_forward(t, h, head, ctx, head.flags.binary_inputs));
}

template <typename T>
LayerParams<T> make_layer(LayerKind kind, std::size_t in_dim, std::size_t out_dim,
                          const LayerFlags& flags, RescaleKind rescale, std::size_t points,
                          std::size_t k, bool with_bias, std::mt19937_64& rng) {
    if (in_dim == 0 || out_dim == 0) throw ConfigError(to_string(kind) + ": zero layer width");
    LayerParams<T> p;
    p.kind = kind;
    p.flags = flags;
    p.in_dim = in_dim;
    p.out_dim = out_dim;
    const bool graph = is_graph_layer(kind);
    const std::size_t fan_in = graph ? 2 * in_dim : in_dim;
    const double bound = std::min(1.0, std::sqrt(6.0 / static_cast<double>(fan_in)));
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor<T> w = Tensor<T>::matrix(out_dim, fan_in);
    for (auto& v : w.storage()) v = static_cast<T>(u(rng));
    p.weight = Parameter<T>(std::move(w));

    const bool binary = has_binary_weights(kind);
    if (binary) {
        p.flags.binary_weights = true;
        p.flags.binary_inputs = true;
        p.rescale_kind = graph && kind != LayerKind::binsage ? rescale : RescaleKind::channel_wise;
        p.alpha = Parameter<T>(Tensor<T>({out_dim}, T(1)));
        if (p.rescale_kind == RescaleKind::rank1_per_mode) {
            if (points == 0 || k == 0) throw ConfigError("rank-1 rescale needs points and k");
            p.beta = Parameter<T>(Tensor<T>({points}, T(1)));
            p.gamma = Parameter<T>(Tensor<T>({k}, T(1)));
        }
    }
    if (p.flags.activation == Activation::prelu)
        p.prelu_slope = Parameter<T>(Tensor<T>({1}, T(0.25)));

    switch (kind) {
        case LayerKind::edgeconv:
            if (flags.use_bn) p.bn_out = BatchNormBlock<T>(out_dim);
            break;
        case LayerKind::binedgeconv:
            if (flags.use_bn) {
                p.bn_node = BatchNormBlock<T>(in_dim);
                p.bn_edge = BatchNormBlock<T>(in_dim);
            }
            if (flags.binary_outputs) p.bn_out = BatchNormBlock<T>(out_dim);
            break;
        case LayerKind::xoredgeconv_bf1:
        case LayerKind::xoredgeconv_bf2:
            p.flags.binary_outputs = true;
            p.flags.knn_metric = KnnMetric::hamming_matmul;
            p.flags.bn_placement = kind == LayerKind::xoredgeconv_bf1
                                       ? BnPlacement::post_aggregation
                                       : BnPlacement::pre_aggregation;
            p.bn_out = BatchNormBlock<T>(out_dim);
            break;
        case LayerKind::sage:
            break;
        case LayerKind::binsage:
            p.bn_node = BatchNormBlock<T>(in_dim);
            p.bn_edge = BatchNormBlock<T>(in_dim);
            break;
        case LayerKind::dense:
            if (with_bias) p.bias = Parameter<T>(Tensor<T>({out_dim}, T(0)));
            else if (flags.use_bn) p.bn_out = BatchNormBlock<T>(out_dim);
            if (flags.binary_inputs) p.bn_node = BatchNormBlock<T>(in_dim);
            break;
        case LayerKind::binary_dense:
            p.bn_node = BatchNormBlock<T>(in_dim);
            break;
    }
    return p;
}

#define BGNN_OPS_INST(T)                                                                        \
    template struct LayerParams<T>;                                                             \
    template Var layer::graph_forward<T>(Tape<T>&, Var, const GraphTopology&, LayerParams<T>&,  \
                                         const LayerContext<T>&);                               \
    template Var layer::dense_forward<T>(Tape<T>&, Var, LayerParams<T>&, const LayerContext<T>&, \
                                         bool);                                                 \
    template Var layer::bn<T>(Tape<T>&, Var, BatchNormBlock<T>&, bool);                         \
    template Var layer::activate<T>(Tape<T>&, Var, LayerParams<T>&);                            \
    template Var layer::apply_rescale<T>(Tape<T>&, Var, LayerParams<T>&);                       \
    template Tensor<T> edgeconv_float<T>(const Tensor<T>&, const GraphTopology&, LayerParams<T>&); \
    template Tensor<T> binedgeconv<T>(const Tensor<T>&, const GraphTopology&, LayerParams<T>&,  \
                                      bool);                                                    \
    template Tensor<T> sage_float<T>(const Tensor<T>&, const GraphTopology&, LayerParams<T>&);  \
    template Tensor<T> binsage<T>(const Tensor<T>&, const GraphTopology&, LayerParams<T>&, bool); \
    template Tensor<T> batch_norm<T>(const Tensor<T>&, BatchNormBlock<T>&, bool);               \
    template Tensor<T> balance<T>(const Tensor<T>&, BalanceMode, BalanceAxis);                  \
    template Tensor<T> prelu<T>(const Tensor<T>&, T);                                           \
    template Tensor<T> global_pool_classify<T>(const Tensor<T>&, std::size_t,                   \
                                               std::vector<LayerParams<T>>&,                    \
                                               const LayerContext<T>&);                         \
    template LayerParams<T> make_layer<T>(LayerKind, std::size_t, std::size_t, const LayerFlags&, \
                                          RescaleKind, std::size_t, std::size_t, bool,          \
                                          std::mt19937_64&);

BGNN_OPS_INST(float)
BGNN_OPS_INST(double)
#undef BGNN_OPS_INST

template LayerParams<double> LayerParams<float>::cast<double>() const;
template LayerParams<float> LayerParams<double>::cast<float>() const;
template LayerParams<float> LayerParams<float>::cast<float>() const;

}  // namespace bgnn
