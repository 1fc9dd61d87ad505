#pragma once

// Layer operators. Each layer is a function of a Tape so the same code path
// serves training (recording tape), evaluation and deployed inference
// (non-recording tape). The plain Tensor wrappers at the bottom run a single
// operator in evaluation form.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "bgnn/autograd.hpp"
#include "bgnn/bitcore.hpp"
#include "bgnn/graph.hpp"
#include "bgnn/tensor.hpp"

namespace bgnn {

enum class LayerKind {
    edgeconv,
    binedgeconv,
    xoredgeconv_bf1,
    xoredgeconv_bf2,
    sage,
    binsage,
    dense,
    binary_dense
};
enum class Activation { prelu, relu, none };
enum class BnPlacement { pre_aggregation, post_aggregation };

std::string to_string(LayerKind k);
std::string to_string(Activation a);
std::string to_string(BalanceMode m);
std::string to_string(Quantizer q);
std::string to_string(RescaleKind r);
LayerKind parse_layer_kind(const std::string& s);
Activation parse_activation(const std::string& s);
BalanceMode parse_balance(const std::string& s);
Quantizer parse_quantizer(const std::string& s);
RescaleKind parse_rescale(const std::string& s);

bool is_graph_layer(LayerKind k) noexcept;
/// Kinds whose weights are binarized when the weight quantizer is sign.
bool has_binary_weights(LayerKind k) noexcept;
bool is_xor(LayerKind k) noexcept;

struct LayerFlags {
    bool binary_weights = false;
    bool binary_inputs = false;
    bool binary_outputs = false;
    bool use_bn = true;
    BnPlacement bn_placement = BnPlacement::post_aggregation;
    Activation activation = Activation::relu;
    BalanceMode edge_balance = BalanceMode::none;
    KnnMetric knn_metric = KnnMetric::l2;
};

template <typename T>
struct BatchNormBlock {
    Parameter<T> scale;
    Parameter<T> shift;
    BatchNormState<T> state;

    BatchNormBlock() = default;
    explicit BatchNormBlock(std::size_t channels)
        : scale(Tensor<T>({channels}, T(1))), shift(Tensor<T>({channels}, T(0))) {
        state.running_mean = Tensor<T>({channels}, T(0));
        state.running_var = Tensor<T>({channels}, T(1));
    }
    bool empty() const noexcept { return scale.empty(); }
    std::size_t channels() const noexcept { return scale.value.size(); }
};

/// Parameters of one layer. Unused members stay empty.
///   edgeconv:        weight (o x 2d), bn_out on edge messages
///   binedgeconv:     weight (o x 2d), bn_node / bn_edge on the two input
///                    halves, Γ, PReLU, bn_out when binary_outputs
///   xoredgeconv_*:   weight (o x 2d), Γ, PReLU, bn_out before/after max
///   sage:            weight (o x 2d)
///   binsage:         weight (o x 2d), bn_node / bn_edge on [x_i | mean x_j], Γ
///   dense:           weight (o x d), bias (head) or bn_out
///   binary_dense:    weight (o x d), bn_node on the input, Γ, PReLU
template <typename T>
struct LayerParams {
    LayerKind kind = LayerKind::dense;
    LayerFlags flags;
    std::size_t in_dim = 0;
    std::size_t out_dim = 0;

    Parameter<T> weight;
    Parameter<T> bias;
    RescaleKind rescale_kind = RescaleKind::channel_wise;
    Parameter<T> alpha;
    Parameter<T> beta;
    Parameter<T> gamma;
    BatchNormBlock<T> bn_node;
    BatchNormBlock<T> bn_edge;
    BatchNormBlock<T> bn_out;
    Parameter<T> prelu_slope;

    RescaleTensor<T> rescale() const;
    template <typename U>
    LayerParams<U> cast() const;
};

/// Per-call settings shared by every layer of a forward pass.
template <typename T>
struct LayerContext {
    bool training = false;
    Quantizer act_quant = Quantizer::identity;
    Quantizer weight_quant = Quantizer::identity;
    /// Nodes per graph; balance groups and pooling work per graph.
    std::size_t graph_size = 0;
    BalanceMode global_balance = BalanceMode::none;
    /// Binary layers run their products on XNOR/popcount when both operands
    /// are sign-quantized.
    bool allow_packed = true;

    bool packed() const noexcept {
        return allow_packed && act_quant == Quantizer::sign && weight_quant == Quantizer::sign;
    }
};

namespace layer {

/// Graph layer forward; `x` holds the node features of all graphs.
template <typename T>
Var graph_forward(Tape<T>& t, Var x, const GraphTopology& topo, LayerParams<T>& p,
                  const LayerContext<T>& ctx);

/// dense / binary_dense forward. `binarize_input` makes a real-weight dense
/// layer quantize its input (the classifier head of binary models).
template <typename T>
Var dense_forward(Tape<T>& t, Var x, LayerParams<T>& p, const LayerContext<T>& ctx,
                  bool binarize_input = false);

/// Binds a block's affine parameters and applies batch norm.
template <typename T>
Var bn(Tape<T>& t, Var x, BatchNormBlock<T>& b, bool training);

template <typename T>
Var activate(Tape<T>& t, Var x, LayerParams<T>& p);

template <typename T>
Var apply_rescale(Tape<T>& t, Var y, LayerParams<T>& p);

}  // namespace layer

// Evaluation-form wrappers over plain tensors.

template <typename T>
Tensor<T> edgeconv_float(const Tensor<T>& x, const GraphTopology& topo, LayerParams<T>& p);

/// Real-output binary EdgeConv: PReLU(sign(Θ) ⊛ sign(BN(X̃)) ⊙ Γ), max over
/// neighbours. Batch norm runs in training or evaluation form per `training`.
template <typename T>
Tensor<T> binedgeconv(const Tensor<T>& x, const GraphTopology& topo, LayerParams<T>& p,
                      bool training = false);

/// Binary-feature EdgeConv (BF1 or BF2 per p.kind) on packed codes.
BitMatrix xoredgeconv(const BitMatrix& x, const GraphTopology& topo, LayerParams<float>& p,
                      bool training = false);

template <typename T>
Tensor<T> sage_float(const Tensor<T>& x, const GraphTopology& topo, LayerParams<T>& p);

template <typename T>
Tensor<T> binsage(const Tensor<T>& x, const GraphTopology& topo, LayerParams<T>& p,
                  bool training = false);

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, BatchNormBlock<T>& b, bool training);

/// Subtracts the per-channel mean or lower median (axis channel) or the
/// per-row statistic (axis feature).
template <typename T>
Tensor<T> balance(const Tensor<T>& x, BalanceMode mode, BalanceAxis axis = BalanceAxis::channel);

template <typename T>
Tensor<T> prelu(const Tensor<T>& x, T slope);

/// Global max and average pooling per graph, concatenated, then the MLP.
/// The last layer of `mlp` is the classifier head.
template <typename T>
Tensor<T> global_pool_classify(const Tensor<T>& node_embeddings, std::size_t graph_size,
                               std::vector<LayerParams<T>>& mlp, const LayerContext<T>& ctx);

/// Builds a layer with freshly initialised parameters.
template <typename T>
LayerParams<T> make_layer(LayerKind kind, std::size_t in_dim, std::size_t out_dim,
                          const LayerFlags& flags, RescaleKind rescale, std::size_t points,
                          std::size_t k, bool with_bias, std::mt19937_64& rng);

}  // namespace bgnn
