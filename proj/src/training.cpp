#include "bgnn/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "bgnn/lsp.hpp"

namespace bgnn {

std::string to_string(Stage s) {
    switch (s) {
        case Stage::base: return "base";
        case Stage::s1: return "1";
        case Stage::s2: return "2";
        case Stage::s3: return "3";
        case Stage::direct: return "direct";
        case Stage::scratch: return "scratch";
    }
    return "?";
}

Stage parse_stage(const std::string& s) {
    if (s == "base") return Stage::base;
    if (s == "1") return Stage::s1;
    if (s == "2") return Stage::s2;
    if (s == "3") return Stage::s3;
    if (s == "direct") return Stage::direct;
    if (s == "scratch") return Stage::scratch;
    throw ConfigError("unknown stage '" + s + "' (base|1|2|3|direct|scratch)");
}

namespace {

bool binary_weight_stage(Stage s) {
    return s == Stage::s3 || s == Stage::direct || s == Stage::scratch;
}

Similarity parse_similarity(const std::string& s) {
    if (s == "rbf_l2") return Similarity::rbf_l2;
    if (s == "hamming") return Similarity::hamming;
    throw ConfigError("unknown similarity '" + s + "' (rbf_l2|hamming)");
}

}  // namespace

TrainConfig TrainConfig::for_stage(Stage stage, std::size_t epochs, double lr) {
    TrainConfig c;
    c.stage = stage;
    c.epochs = epochs;
    c.lr = stage == Stage::s2 ? 0.25 * lr : lr;
    c.milestones.clear();
    if (binary_weight_stage(stage)) {
        c.weight_decay = 0.0;
        const auto step = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::lround(static_cast<double>(epochs) * 50.0 / 350.0)));
        for (std::size_t e = step; e < epochs; e += step) c.milestones.push_back(e);
    } else if (epochs > 0) {
        c.milestones = {epochs / 2, (3 * epochs) / 4};
    }
    return c;
}

TrainConfig TrainConfig::from_section(const ConfigSection& s) {
    s.reject_unknown({"stage", "epochs", "batch_size", "lr", "lr_decay", "milestones",
                      "weight_decay", "decay_rescale", "temperature", "alpha", "lambda_lsp",
                      "sim_student", "sim_teacher", "teacher_init", "seed", "augment", "scale_lo",
                      "scale_hi", "jitter_sigma", "jitter_clip", "eval_every"});
    const Stage stage = parse_stage(s.get("stage", "base"));
    const auto epochs = s.get_int("epochs", 40);
    if (epochs < 0) throw ConfigError("[train] epochs must be non-negative");
    TrainConfig c = for_stage(stage, static_cast<std::size_t>(epochs), s.get_double("lr", 1e-3));
    const auto bs = s.get_int("batch_size", static_cast<std::int64_t>(c.batch_size));
    if (bs <= 0) throw ConfigError("[train] batch_size must be positive");
    c.batch_size = static_cast<std::size_t>(bs);
    c.lr_decay = s.get_double("lr_decay", c.lr_decay);
    if (s.has("milestones")) {
        c.milestones.clear();
        for (const auto& m : split(s.get("milestones", ""), ',')) {
            if (m.empty()) continue;
            try {
                c.milestones.push_back(static_cast<std::size_t>(std::stoul(m)));
            } catch (const std::exception&) {
                throw ConfigError("[train] milestones: bad entry '" + m + "'");
            }
        }
    }
    c.weight_decay = s.get_double("weight_decay", c.weight_decay);
    c.decay_rescale = s.get_bool("decay_rescale", c.decay_rescale);
    c.temperature = s.get_double("temperature", c.temperature);
    c.alpha = s.get_double("alpha", c.alpha);
    c.lambda_lsp = s.get_double("lambda_lsp", c.lambda_lsp);
    if (s.has("sim_student")) c.sim_student = parse_similarity(s.get("sim_student", ""));
    if (s.has("sim_teacher")) c.sim_teacher = parse_similarity(s.get("sim_teacher", ""));
    c.teacher_init = s.get_bool("teacher_init", c.teacher_init);
    c.seed = static_cast<std::uint64_t>(s.get_int("seed", static_cast<std::int64_t>(c.seed)));
    c.augment = s.get_bool("augment", c.augment);
    c.scale_lo = s.get_double("scale_lo", c.scale_lo);
    c.scale_hi = s.get_double("scale_hi", c.scale_hi);
    c.jitter_sigma = s.get_double("jitter_sigma", c.jitter_sigma);
    c.jitter_clip = s.get_double("jitter_clip", c.jitter_clip);
    c.eval_every = static_cast<std::size_t>(s.get_int("eval_every", 0));
    c.validate();
    return c;
}

void TrainConfig::validate() const {
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
    if (!(lambda_lsp >= 0.0)) throw ConfigError("lambda_lsp must be non-negative");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!std::is_sorted(milestones.begin(), milestones.end()))
        throw ConfigError("milestones must be sorted");
    if (!(scale_lo > 0.0 && scale_lo <= scale_hi)) throw ConfigError("bad augmentation scale range");
}

double TrainConfig::lr_at(std::size_t epoch) const {
    double r = lr;
    for (auto m : milestones)
        if (m > 0 && m <= epoch) r *= lr_decay;
    return r;
}

std::string TrainState::rng_state() const {
    std::ostringstream o;
    o << rng;
    return o.str();
}

void TrainState::set_rng_state(const std::string& s) {
    std::istringstream in(s);
    in >> rng;
    if (!in) throw FormatError("bad RNG state in checkpoint");
}

Tensor<float> ste_sign_backward(const Tensor<float>& upstream, const Tensor<float>& latent) {
    if (!upstream.same_shape(latent)) throw ShapeError("ste_sign_backward: shape mismatch");
    Tensor<float> g(upstream.shape());
    for (std::size_t i = 0; i < g.size(); ++i)
        g[i] = (latent[i] >= -1.0f && latent[i] <= 1.0f) ? upstream[i] : 0.0f;
    return g;
}

template <typename T>
void latent_weight_maintenance(Tensor<T>& w) {
    const std::size_t rows = w.rows(), cols = w.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        double mean = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mean += w[r * cols + c];
        mean /= static_cast<double>(cols);
        for (std::size_t c = 0; c < cols; ++c) {
            const double v = static_cast<double>(w[r * cols + c]) - mean;
            w[r * cols + c] = static_cast<T>(std::clamp(v, -1.0, 1.0));
        }
    }
}
template void latent_weight_maintenance(Tensor<float>&);
template void latent_weight_maintenance(Tensor<double>&);

double logit_matching_loss(const Tensor<double>& student_logits, const Tensor<double>& teacher_logits,
                           double temperature, double alpha, std::span<const int> labels) {
    Tape<double> t(false);
    Var s = t.constant(student_logits);
    const double ce = t.value(ad::cross_entropy(t, s, labels))[0];
    const double kl = t.value(ad::distill_kl(t, s, teacher_logits, temperature))[0];
    return (1.0 - alpha) * ce + alpha * kl;
}

double lsp_loss(const Tensor<double>& student_x, const Tensor<double>& teacher_x,
                const GraphTopology& topo_s, const GraphTopology& topo_t, Similarity sim_s,
                Similarity sim_t) {
    Tape<double> t(false);
    Var s = t.constant(student_x);
    return t.value(ad::lsp_loss(t, s, teacher_x, topo_s, topo_t, sim_s, sim_t))[0];
}

template <typename T>
void backward(Model<T>& model, Tape<T>& tape, Var loss) {
    model.for_each_parameter([](const std::string&, Parameter<T>& p, ParamRole) { p.zero_grad(); });
    tape.backward(loss);
}
template void backward(Model<float>&, Tape<float>&, Var);
template void backward(Model<double>&, Tape<double>&, Var);

void adam_step(Model<float>& model, TrainState& state, const TrainConfig& cfg, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++state.step;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    const bool maintain = model.spec.weight_quant == Quantizer::sign;
    model.for_each_parameter([&](const std::string& name, Parameter<float>& p, ParamRole role) {
        auto& slot = state.adam[name];
        if (!slot.m.same_shape(p.value)) {
            slot.m = Tensor<float>(p.value.shape());
            slot.v = Tensor<float>(p.value.shape());
        }
        if (!p.grad.same_shape(p.value)) p.zero_grad();
        const bool decay = cfg.weight_decay > 0.0 &&
                           (role == ParamRole::weight_binary || role == ParamRole::weight_real ||
                            (cfg.decay_rescale && role == ParamRole::rescale));
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            double g = p.grad[i];
            if (decay) g += cfg.weight_decay * p.value[i];
            const double m = b1 * slot.m[i] + (1.0 - b1) * g;
            const double v = b2 * slot.v[i] + (1.0 - b2) * g * g;
            slot.m[i] = static_cast<float>(m);
            slot.v[i] = static_cast<float>(v);
            p.value[i] -= static_cast<float>(lr * (m / c1) / (std::sqrt(v / c2) + eps));
        }
        if (maintain && role == ParamRole::weight_binary) latent_weight_maintenance(p.value);
    });
}

Tensor<float> make_batch(const PointCloudDataset& ds, std::span<const std::size_t> idx,
                         std::size_t points, const TrainConfig* augment, std::mt19937_64* rng) {
    Tensor<float> x = Tensor<float>::matrix(idx.size() * points, 3);
    std::uniform_real_distribution<double> scale(augment ? augment->scale_lo : 1.0,
                                                 augment ? augment->scale_hi : 1.0);
    std::normal_distribution<double> jitter(0.0, augment ? augment->jitter_sigma : 0.0);
    for (std::size_t b = 0; b < idx.size(); ++b) {
        const auto& c = ds.clouds.at(idx[b]);
        if (c.rows() != points || c.cols() != 3)
            throw ShapeError("cloud " + std::to_string(idx[b]) + " has shape " +
                             shape_string(c.shape()) + ", model expects " +
                             std::to_string(points) + " x 3");
        double s[3] = {1.0, 1.0, 1.0};
        if (augment && rng)
            for (auto& v : s) v = scale(*rng);
        for (std::size_t p = 0; p < points; ++p)
            for (std::size_t a = 0; a < 3; ++a) {
                double v = c.at(p, a) * s[a];
                if (augment && rng)
                    v += std::clamp(jitter(*rng), -augment->jitter_clip, augment->jitter_clip);
                x.at(b * points + p, a) = static_cast<float>(v);
            }
    }
    return x;
}

namespace {

int argmax_row(const Tensor<float>& logits, std::size_t r) {
    const std::size_t c = logits.cols();
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
        if (logits[r * c + j] > logits[r * c + best]) best = j;
    return static_cast<int>(best);
}

}  // namespace

std::vector<int> predict_classes(Model<float>& model, const PointCloudDataset& ds,
                                 std::size_t batch_size) {
    std::vector<int> out;
    out.reserve(ds.size());
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < ds.size(); start += batch_size) {
        idx.clear();
        for (std::size_t i = start; i < std::min(ds.size(), start + batch_size); ++i) idx.push_back(i);
        const Tensor<float> logits = model.predict(make_batch(ds, idx, model.spec.points, nullptr, nullptr));
        for (std::size_t r = 0; r < idx.size(); ++r) out.push_back(argmax_row(logits, r));
    }
    return out;
}

double evaluate(Model<float>& model, const PointCloudDataset& ds, std::size_t batch_size) {
    if (ds.size() == 0) return 0.0;
    const auto pred = predict_classes(model, ds, batch_size);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == ds.labels[i];
    return static_cast<double>(ok) / static_cast<double>(ds.size());
}

namespace {

/// Topology describing the local structure at transfer point p.
GraphTopology transfer_topology(const Model<float>& m, const ForwardResult<float>& r,
                                const Tape<float>& t, std::size_t p) {
    if (p + 1 < r.topologies.size()) return r.topologies[p + 1];
    return knn_batched(t.value(r.conv_outputs[p]), m.spec.points, m.spec.k,
                       m.convs[p].flags.knn_metric);
}

}  // namespace

TrainResult train_model(Model<float>& student, const PointCloudDataset& train,
                        const PointCloudDataset* test, const TrainConfig& cfg,
                        Model<float>* teacher, TrainState* state, const MetricSink& sink,
                        const EpochHook& on_epoch) {
    cfg.validate();
    student.spec.validate();
    if (train.size() == 0) throw ValueError("training set is empty");
    if (teacher) {
        if (teacher->spec.classes != student.spec.classes)
            throw ConfigError("teacher and student class counts differ");
        if (teacher->spec.points != student.spec.points)
            throw ConfigError("teacher and student expect different cloud sizes");
        if (cfg.lambda_lsp > 0.0 && teacher->convs.size() != student.convs.size())
            throw ConfigError("LSP needs teacher and student with the same number of graph layers");
    }
    TrainState local;
    if (!state) state = &local;
    if (state->step == 0 && state->epoch == 0) state->rng.seed(cfg.seed);

    TrainResult result;
    auto emit = [&](std::size_t epoch, const std::string& split, const std::string& metric, double v) {
        MetricRecord rec{epoch, split, metric, v};
        result.history.push_back(rec);
        if (sink) sink(rec);
    };

    const std::size_t n = train.size();
    const std::vector<std::size_t> tps = transfer_points(student.spec);
    std::vector<std::size_t> order(n);
    for (std::size_t epoch = state->epoch; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.lr_at(epoch);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), state->rng);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t end = std::min(n, start + cfg.batch_size);
            std::span<const std::size_t> idx(order.data() + start, end - start);
            const Tensor<float> x = make_batch(train, idx, student.spec.points,
                                               cfg.augment ? &cfg : nullptr, &state->rng);
            std::vector<int> labels;
            for (auto i : idx) labels.push_back(train.labels[i]);

            Tape<float> tape(true);
            ForwardOptions<float> opt;
            opt.training = true;
            opt.rng = &state->rng;
            ForwardResult<float> r = student.forward(tape, x, opt);
            Var loss = ad::cross_entropy(tape, r.logits, std::span<const int>(labels));
            if (teacher) {
                Tape<float> tt(false);
                ForwardResult<float> tr = teacher->forward(tt, x, ForwardOptions<float>{});
                Var kl = ad::distill_kl(tape, r.logits, tt.value(tr.logits),
                                        static_cast<float>(cfg.temperature));
                loss = ad::add(tape, ad::scale(tape, loss, static_cast<float>(1.0 - cfg.alpha)),
                               ad::scale(tape, kl, static_cast<float>(cfg.alpha)));
                if (cfg.lambda_lsp > 0.0) {
                    for (auto p : tps) {
                        const GraphTopology ts = transfer_topology(student, r, tape, p);
                        const GraphTopology tt_topo = transfer_topology(*teacher, tr, tt, p);
                        Var l = ad::lsp_loss(tape, r.conv_outputs[p], tt.value(tr.conv_outputs[p]),
                                             ts, tt_topo, cfg.sim_student, cfg.sim_teacher);
                        loss = ad::add(tape, loss, ad::scale(tape, l, static_cast<float>(cfg.lambda_lsp)));
                    }
                }
            }
            const double lv = tape.value(loss)[0];
            if (!std::isfinite(lv)) throw ValueError("training diverged: non-finite loss");
            loss_sum += lv * static_cast<double>(idx.size());
            const auto& logits = tape.value(r.logits);
            for (std::size_t b = 0; b < idx.size(); ++b) correct += argmax_row(logits, b) == labels[b];

            backward(student, tape, loss);
            adam_step(student, *state, cfg, lr);
        }
        state->epoch = epoch + 1;
        emit(epoch + 1, "train", "loss", loss_sum / static_cast<double>(n));
        emit(epoch + 1, "train", "accuracy", static_cast<double>(correct) / static_cast<double>(n));
        emit(epoch + 1, "train", "lr", lr);
        if (test && test->size() > 0 && cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0)
            emit(epoch + 1, "test", "accuracy", evaluate(student, *test));
        if (on_epoch) on_epoch(student, *state);
    }
    result.final_train_accuracy = evaluate(student, train);
    emit(cfg.epochs, "train", "eval_accuracy", result.final_train_accuracy);
    if (test && test->size() > 0) {
        result.final_test_accuracy = evaluate(student, *test);
        emit(cfg.epochs, "test", "eval_accuracy", result.final_test_accuracy);
    }
    return result;
}

ModelSpec stage_spec(const ModelSpec& binary_spec, Stage stage) {
    if (!binary_spec.binary()) throw ConfigError("stage models need a binary architecture");
    ModelSpec s = binary_spec;
    switch (stage) {
        case Stage::s1:
            s.act_quant = Quantizer::tanh;
            s.weight_quant = Quantizer::identity;
            break;
        case Stage::s2:
            s.act_quant = Quantizer::sign;
            s.weight_quant = Quantizer::identity;
            break;
        case Stage::s3:
        case Stage::direct:
        case Stage::scratch:
            s.act_quant = Quantizer::sign;
            s.weight_quant = Quantizer::sign;
            break;
        case Stage::base:
            throw ConfigError("the base stage trains a real-valued model");
    }
    s.validate();
    return s;
}

namespace {

TrainConfig stage_config(const TrainConfig& common, Stage stage, std::size_t epochs, double lr,
                         std::uint64_t seed_offset) {
    TrainConfig c = common;
    const TrainConfig d = TrainConfig::for_stage(stage, epochs, lr);
    c.stage = stage;
    c.epochs = epochs;
    c.lr = d.lr;
    c.milestones = d.milestones;
    c.weight_decay = binary_weight_stage(stage) ? 0.0 : common.weight_decay;
    c.seed = common.seed + seed_offset;
    return c;
}

}  // namespace

CascadeConfig CascadeConfig::from_section(const ConfigSection& s, const TrainConfig& common) {
    s.reject_unknown({"epochs_s1", "epochs_s2", "epochs_s3", "lr"});
    CascadeConfig c;
    auto epochs = [&](const char* key, std::size_t fallback) {
        const auto v = s.get_int(key, static_cast<std::int64_t>(fallback));
        if (v < 0) throw ConfigError(std::string("[distill] ") + key + " must be non-negative");
        return static_cast<std::size_t>(v);
    };
    c.epochs_s1 = epochs("epochs_s1", c.epochs_s1);
    c.epochs_s2 = epochs("epochs_s2", c.epochs_s2);
    c.epochs_s3 = epochs("epochs_s3", c.epochs_s3);
    c.lr = s.get_double("lr", c.lr);
    if (!(c.lr > 0.0)) throw ConfigError("[distill] lr must be positive");
    c.common = common;
    return c;
}

CascadeResult cascaded_distillation(Model<float>* base, const ModelSpec& binary_spec,
                                    const PointCloudDataset& train, const PointCloudDataset* test,
                                    const CascadeConfig& cfg, const MetricSink& sink) {
    if (!base) throw ConfigError("cascaded distillation needs a trained base model as teacher");
    CascadeResult out;
    auto tagged = [&](const char* stage) -> MetricSink {
        if (!sink) return {};
        return [&sink, stage](const MetricRecord& r) {
            sink({r.epoch, std::string("s") + stage + "/" + r.split, r.metric, r.value});
        };
    };
    auto hook = [&](int stage) -> EpochHook {
        if (!cfg.on_epoch) return {};
        return [&cfg, stage](Model<float>& m, const TrainState& st) { cfg.on_epoch(stage, m, st); };
    };

    Model<float> m1 = Model<float>::init(stage_spec(binary_spec, Stage::s1), cfg.common.seed + 101);
    out.results.push_back(train_model(m1, train, test,
                                      stage_config(cfg.common, Stage::s1, cfg.epochs_s1, cfg.lr, 1),
                                      base, nullptr, tagged("1"), hook(1)));
    out.stages.push_back(m1);

    Model<float> m2 = m1;
    m2.spec = stage_spec(binary_spec, Stage::s2);
    out.results.push_back(train_model(m2, train, test,
                                      stage_config(cfg.common, Stage::s2, cfg.epochs_s2, cfg.lr, 2),
                                      &out.stages[0], nullptr, tagged("2"), hook(2)));
    out.stages.push_back(m2);

    const ModelSpec s3 = stage_spec(binary_spec, Stage::s3);
    Model<float> m3 = cfg.common.teacher_init ? m2 : Model<float>::init(s3, cfg.common.seed + 303);
    m3.spec = s3;
    if (cfg.common.teacher_init)
        m3.for_each_parameter([&](const std::string&, Parameter<float>& p, ParamRole role) {
            if (m3.stores_binary(role)) latent_weight_maintenance(p.value);
        });
    out.results.push_back(train_model(m3, train, test,
                                      stage_config(cfg.common, Stage::s3, cfg.epochs_s3, cfg.lr, 3),
                                      &out.stages[1], nullptr, tagged("3"), hook(3)));
    out.stages.push_back(m3);
    return out;
}

}  // namespace bgnn
