#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "bgnn/data.hpp"
#include "bgnn/model.hpp"

namespace bgnn {

/// base: the real-valued model. 1/2/3: cascade stages. direct: fully binary
/// model distilled straight from the base. scratch: fully binary, no teacher.
enum class Stage { base, s1, s2, s3, direct, scratch };

std::string to_string(Stage s);
Stage parse_stage(const std::string& s);

struct TrainConfig {
    Stage stage = Stage::base;
    std::size_t epochs = 40;
    std::size_t batch_size = 16;
    double lr = 1e-3;
    double lr_decay = 0.5;
    /// Epochs (0-based) at whose start the learning rate is multiplied by lr_decay.
    std::vector<std::size_t> milestones;
    double weight_decay = 1e-5;
    bool decay_rescale = false;
    double temperature = 3.0;
    double alpha = 0.1;
    double lambda_lsp = 100.0;
    Similarity sim_student = Similarity::rbf_l2;
    Similarity sim_teacher = Similarity::rbf_l2;
    /// Stage 3: start from the stage-2 weights instead of a fresh init.
    bool teacher_init = false;
    std::uint64_t seed = 1;
    bool augment = false;
    double scale_lo = 2.0 / 3.0;
    double scale_hi = 1.5;
    double jitter_sigma = 0.01;
    double jitter_clip = 0.05;
    /// Evaluate on the test split every this many epochs (0: only at the end).
    std::size_t eval_every = 0;

    /// Learning rate, milestones and weight decay for `stage` over `epochs`
    /// starting from the base learning rate `lr`.
    static TrainConfig for_stage(Stage stage, std::size_t epochs, double lr);
    /// Reads a [train] section. Absent keys take the for_stage defaults.
    static TrainConfig from_section(const ConfigSection& s);
    void validate() const;
    double lr_at(std::size_t epoch) const;
};

/// Adam moments for one parameter.
struct AdamSlot {
    Tensor<float> m;
    Tensor<float> v;
};

struct TrainState {
    std::map<std::string, AdamSlot> adam;
    std::uint64_t step = 0;
    std::size_t epoch = 0;
    std::mt19937_64 rng;

    std::string rng_state() const;
    void set_rng_state(const std::string& s);
};

/// One line of the metric log: epoch, split, metric, value.
struct MetricRecord {
    std::size_t epoch;
    std::string split;
    std::string metric;
    double value;
};
using MetricSink = std::function<void(const MetricRecord&)>;

/// Called after every epoch with the student and its optimizer state.
using EpochHook = std::function<void(Model<float>&, const TrainState&)>;

struct TrainResult {
    double final_train_accuracy = 0.0;
    double final_test_accuracy = 0.0;
    std::vector<MetricRecord> history;
};

/// upstream where |latent| <= 1, zero elsewhere.
Tensor<float> ste_sign_backward(const Tensor<float>& upstream, const Tensor<float>& latent);

/// Subtracts each output channel's (row's) mean, then clips to [-1, 1].
template <typename T>
void latent_weight_maintenance(Tensor<T>& weights);

/// (1 - alpha) * CE(student, labels) + alpha * T^2 * KL(p_teacher || p_student).
double logit_matching_loss(const Tensor<double>& student_logits, const Tensor<double>& teacher_logits,
                           double temperature, double alpha, std::span<const int> labels);

/// Mean over nodes of KL(LS^s || LS^t) over the union neighbourhood.
double lsp_loss(const Tensor<double>& student_x, const Tensor<double>& teacher_x,
                const GraphTopology& topo_s, const GraphTopology& topo_t,
                Similarity sim_s = Similarity::rbf_l2, Similarity sim_t = Similarity::rbf_l2);

/// Reverse pass from a scalar loss; fills Parameter::grad of every bound
/// parameter (gradients are zeroed first).
template <typename T>
void backward(Model<T>& model, Tape<T>& tape, Var loss);

/// One Adam update of every parameter with the state's moments.
void adam_step(Model<float>& model, TrainState& state, const TrainConfig& cfg, double lr);

/// Builds a (B * points) x 3 batch from clouds `idx`, optionally augmented.
Tensor<float> make_batch(const PointCloudDataset& ds, std::span<const std::size_t> idx,
                         std::size_t points, const TrainConfig* augment, std::mt19937_64* rng);

/// Fraction of correctly classified clouds in evaluation mode.
double evaluate(Model<float>& model, const PointCloudDataset& ds, std::size_t batch_size = 32);

/// Predicted class per cloud in evaluation mode.
std::vector<int> predict_classes(Model<float>& model, const PointCloudDataset& ds,
                                 std::size_t batch_size = 32);

/// Trains `student` on `train`. With a teacher the loss is logit matching plus
/// lambda_lsp times the LSP loss summed over transfer points.
TrainResult train_model(Model<float>& student, const PointCloudDataset& train,
                        const PointCloudDataset* test, const TrainConfig& cfg,
                        Model<float>* teacher, TrainState* state = nullptr,
                        const MetricSink& sink = {}, const EpochHook& on_epoch = {});

/// Quantizers of a stage applied to a binary architecture.
ModelSpec stage_spec(const ModelSpec& binary_spec, Stage stage);

struct CascadeConfig {
    std::size_t epochs_s1 = 20;
    std::size_t epochs_s2 = 20;
    std::size_t epochs_s3 = 20;
    double lr = 1e-3;
    TrainConfig common;  // distillation, batch and augmentation settings
    /// Per-epoch hook with the stage number (1, 2, 3).
    std::function<void(int, Model<float>&, const TrainState&)> on_epoch;

    /// Reads a [distill] section (epochs_s1, epochs_s2, epochs_s3, lr); the
    /// distillation and batch settings come from `common`.
    static CascadeConfig from_section(const ConfigSection& s, const TrainConfig& common);
};

struct CascadeResult {
    std::vector<Model<float>> stages;  // stage 1, 2, 3
    std::vector<TrainResult> results;
};

/// Three-stage distillation from a trained real-valued model into the binary
/// architecture `binary_spec`. Throws ConfigError when `base` is null.
CascadeResult cascaded_distillation(Model<float>* base, const ModelSpec& binary_spec,
                                    const PointCloudDataset& train, const PointCloudDataset* test,
                                    const CascadeConfig& cfg, const MetricSink& sink = {});

}  // namespace bgnn
