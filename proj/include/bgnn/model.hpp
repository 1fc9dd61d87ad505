#pragma once

// Point-cloud classifier in the DGCNN layout: a stack of graph layers, each on
// a k-NN graph rebuilt from its own input, a pointwise embedding of the
// concatenated layer outputs, global max + average pooling and an MLP whose
// last layer is real-weighted.

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "bgnn/config.hpp"
#include "bgnn/ops.hpp"

namespace bgnn {

struct LayerSpec {
    LayerKind kind = LayerKind::dense;
    std::size_t width = 0;
    /// binedgeconv only: quantize the aggregated output (feeds XorEdgeConv).
    bool binary_outputs = false;

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ModelSpec {
    std::string name = "model";
    std::size_t in_dim = 3;
    std::size_t points = 128;
    std::size_t k = 10;
    std::size_t classes = 3;
    std::vector<LayerSpec> convs;
    LayerSpec embedding{LayerKind::dense, 128, false};
    std::vector<LayerSpec> mlp;
    Activation activation = Activation::relu;
    Quantizer act_quant = Quantizer::identity;
    Quantizer weight_quant = Quantizer::identity;
    BalanceMode edge_balance = BalanceMode::none;
    BalanceMode global_balance = BalanceMode::none;
    RescaleKind rescale = RescaleKind::channel_wise;
    double dropout = 0.5;

    /// Throws ConfigError on any inconsistency.
    void validate() const;
    /// True when any layer is a binarized kind.
    bool binary() const noexcept;

    std::string to_text() const;
    static ModelSpec from_section(const ConfigSection& s);
    static ModelSpec from_text(const std::string& text);

    /// "<variant>-<size>" with variant float|rf|bf1|bf2 and size mini|dgcnn40.
    static ModelSpec preset(const std::string& name);

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

enum class ParamRole { weight_binary, weight_real, bias, rescale, bn_scale, bn_shift, prelu };

/// Wall time per layer category, accumulated over forward calls.
struct ForwardProfile {
    std::map<std::string, double> seconds;

    class Scope {
    public:
        Scope(ForwardProfile* p, const char* category);
        ~Scope();
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        ForwardProfile* profile_;
        const char* category_;
        std::chrono::steady_clock::time_point start_;
    };
};

template <typename T>
struct ForwardOptions {
    bool training = false;
    /// Dropout masks are drawn from here in training; null disables dropout.
    std::mt19937_64* rng = nullptr;
    /// Reuse these topologies instead of running k-NN (one per graph layer).
    const std::vector<GraphTopology>* fixed_topologies = nullptr;
    bool allow_packed = true;
    ForwardProfile* profile = nullptr;
};

template <typename T>
struct ForwardResult {
    Var logits;
    /// Node features after each graph layer.
    std::vector<Var> conv_outputs;
    /// Topology each graph layer ran on.
    std::vector<GraphTopology> topologies;
};

template <typename T>
class Model {
public:
    ModelSpec spec;
    std::vector<LayerParams<T>> convs;
    LayerParams<T> embedding;
    std::vector<LayerParams<T>> mlp;
    LayerParams<T> head;

    static Model init(const ModelSpec& spec, std::uint64_t seed);

    /// `points` holds B graphs of spec.points nodes each, rows node-major.
    ForwardResult<T> forward(Tape<T>& tape, const Tensor<T>& points, const ForwardOptions<T>& opt);

    /// Evaluation-mode logits on a non-recording tape.
    Tensor<T> predict(const Tensor<T>& points);

    /// Every trainable tensor with a stable dotted name.
    void for_each_parameter(const std::function<void(const std::string&, Parameter<T>&, ParamRole)>& fn);
    /// Batch-norm running statistics.
    void for_each_buffer(const std::function<void(const std::string&, Tensor<T>&)>& fn);

    std::size_t parameter_count();
    /// Elements of weights that are sign-quantized in the deployed model.
    std::size_t binary_weight_count();
    /// True when weight tensor `role` is stored as bits for this spec.
    bool stores_binary(ParamRole role) const noexcept;

    template <typename U>
    Model<U> cast() const;

    LayerContext<T> context(bool training, bool allow_packed = true) const;
};

/// Transfer points for LSP: outputs of every graph layer except the first.
std::vector<std::size_t> transfer_points(const ModelSpec& spec);

}  // namespace bgnn
