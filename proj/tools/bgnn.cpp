// bgnn: train, distill, infer, convert and benchmark binary graph networks.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "bgnn/bench.hpp"
#include "bgnn/config.hpp"
#include "bgnn/data.hpp"
#include "bgnn/model.hpp"
#include "bgnn/model_io.hpp"
#include "bgnn/runtime.hpp"
#include "bgnn/training.hpp"

namespace fs = std::filesystem;
using namespace bgnn;

namespace {

struct Common {
    std::string config_path;
    std::string model_path;
    std::string data_path;
    std::string out;
    std::string stage;
    std::string resume;
    std::int64_t seed = -1;
    int threads = 1;
};

Config load_config(const Common& c) {
    Config cfg = c.config_path.empty() ? Config{} : Config::load(c.config_path);
    cfg.reject_unknown_sections({"model", "data", "train", "distill", "bench"});
    if (c.seed >= 0) cfg.section_mut("train").set("seed", std::to_string(c.seed));
    if (!c.stage.empty()) cfg.section_mut("train").set("stage", c.stage);
    if (!c.data_path.empty()) {
        auto& d = cfg.section_mut("data");
        d.set("source", "xyz");
        d.set("path", c.data_path);
    }
    return cfg;
}

std::uint64_t run_seed(const Config& cfg) {
    return static_cast<std::uint64_t>(cfg.section("train").get_int("seed", 1));
}

PointCloudDataset load_data(const Config& cfg, const ModelSpec& spec) {
    ConfigSection d = cfg.section("data");
    if (d.get("source", "synth") == "synth" && !d.has("points"))
        d.set("points", std::to_string(spec.points));
    PointCloudDataset ds = dataset_from_section(d, run_seed(cfg));
    for (const auto& cloud : ds.clouds) {
        if (cloud.cols() != spec.in_dim)
            throw ShapeError("data has " + std::to_string(cloud.cols()) +
                             " features per point, model expects " + std::to_string(spec.in_dim));
    }
    bool resample = false;
    for (const auto& cloud : ds.clouds) resample |= cloud.rows() != spec.points;
    if (resample) resample_points(ds, spec.points, run_seed(cfg));
    if (ds.classes > spec.classes)
        throw ConfigError("data has " + std::to_string(ds.classes) + " classes, model has " +
                          std::to_string(spec.classes));
    return ds;
}

std::string iso_time() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream out;
    out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return out.str();
}

/// Effective config, its CRC32 and the code revision: enough to rerun.
void write_manifest(const fs::path& dir, const std::string& command, const Config& cfg,
                    const Common& c, const nlohmann::json& extra = {}) {
    fs::create_directories(dir);
    const std::string text = cfg.to_text();
    {
        std::ofstream f(dir / "config.ini");
        f << text;
    }
    std::ostringstream crc;
    crc << std::hex << std::setw(8) << std::setfill('0')
        << crc32_of(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    nlohmann::json j;
    j["command"] = command;
    j["config_crc32"] = crc.str();
    j["config_file"] = "config.ini";
    j["seed"] = run_seed(cfg);
    j["threads"] = runtime::threads();
    j["version"] = runtime::version();
    j["git_revision"] = runtime::git_revision();
    j["machine"] = runtime::machine_descriptor();
    j["started"] = iso_time();
    if (!c.model_path.empty()) j["model"] = c.model_path;
    if (!c.resume.empty()) j["resume"] = c.resume;
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
    std::ofstream f(dir / "manifest.json");
    f << j.dump(2) << "\n";
}

class MetricLog {
public:
    explicit MetricLog(const fs::path& path) : out_(path, std::ios::app) {
        if (!out_) throw Error("cannot open metric log " + path.string());
    }
    void operator()(const MetricRecord& r) {
        std::ostringstream line;
        line << r.epoch << '\t' << r.split << '\t' << r.metric << '\t' << std::setprecision(8)
             << r.value << '\n';
        out_ << line.str() << std::flush;
        std::cout << line.str() << std::flush;
    }

private:
    std::ofstream out_;
};

void save(const fs::path& path, Model<float>& model, RecordKind kind,
          const TrainState* state = nullptr) {
    SaveOptions opt;
    opt.kind = kind;
    opt.state = state;
    write_file(path.string(), save_model(model, opt));
}

LoadedModel load(const std::string& path) {
    if (path.empty()) throw ConfigError("--model is required");
    return load_model(read_file(path));
}

ModelSpec spec_from(const Config& cfg) {
    const auto& s = cfg.section("model");
    if (s.values().empty()) return ModelSpec::preset("float-mini");
    return ModelSpec::from_section(s);
}

int cmd_train(const Common& c) {
    Config cfg = load_config(c);
    const fs::path out = c.out.empty() ? fs::path("run") : fs::path(c.out);
    TrainConfig tc = TrainConfig::from_section(cfg.section("train"));
    ModelSpec spec = spec_from(cfg);
    if (tc.stage == Stage::s1 || tc.stage == Stage::s2 || tc.stage == Stage::s3)
        throw ConfigError("stages 1-3 run under 'distill'; train takes base, direct or scratch");
    if (tc.stage == Stage::direct || tc.stage == Stage::scratch) spec = stage_spec(spec, tc.stage);
    else if (spec.binary())
        throw ConfigError("stage base trains a real-valued model; the spec is binary");

    std::optional<LoadedModel> teacher;
    if (tc.stage == Stage::direct) teacher = load(c.model_path);
    else if (!c.model_path.empty())
        throw ConfigError("--model (teacher) only applies to --stage direct");

    Model<float> model = Model<float>::init(spec, tc.seed);
    TrainState state;
    if (!c.resume.empty()) {
        LoadedModel ck = load(c.resume);
        if (ck.kind != RecordKind::checkpoint || !ck.state)
            throw FormatError(c.resume + " is not a training checkpoint");
        if (ck.model.spec.to_text() != spec.to_text())
            throw ConfigError("checkpoint spec differs from the configured model");
        model = std::move(ck.model);
        state = std::move(*ck.state);
    }
    const PointCloudDataset ds = load_data(cfg, spec);
    const PointCloudDataset train = ds.subset("train");
    const PointCloudDataset test = ds.subset("test");

    write_manifest(out, "train", cfg, c, {{"stage", to_string(tc.stage)}});
    MetricLog log(out / "metrics.tsv");
    auto sink = [&](const MetricRecord& r) { log(r); };
    auto hook = [&](Model<float>& m, const TrainState& st) {
        save(out / "checkpoint.bgnn", m, RecordKind::checkpoint, &st);
    };
    train_model(model, train, test.size() ? &test : nullptr, tc,
                teacher ? &teacher->model : nullptr, &state, sink, hook);
    save(out / "checkpoint.bgnn", model, RecordKind::checkpoint, &state);
    save(out / "model.bgnn", model, RecordKind::deploy);
    std::cout << "wrote " << (out / "model.bgnn").string() << "\n";
    return 0;
}

int cmd_distill(const Common& c) {
    Config cfg = load_config(c);
    const fs::path out = c.out.empty() ? fs::path("run") : fs::path(c.out);
    const auto& ts = cfg.section("train");
    TrainConfig common = TrainConfig::from_section(ts);
    const ModelSpec binary = spec_from(cfg);
    if (!binary.binary()) throw ConfigError("distill needs a binary [model] architecture");
    LoadedModel teacher = load(c.model_path);
    const PointCloudDataset ds = load_data(cfg, binary);
    const PointCloudDataset train = ds.subset("train");
    const PointCloudDataset test = ds.subset("test");
    const PointCloudDataset* testp = test.size() ? &test : nullptr;

    fs::create_directories(out);
    MetricLog log(out / "metrics.tsv");
    auto sink = [&](const MetricRecord& r) { log(r); };

    CascadeConfig cc = CascadeConfig::from_section(cfg.section("distill"), common);
    if (!ts.has("stage") || common.stage == Stage::base) {
        write_manifest(out, "distill", cfg, c, {{"stage", "cascade"}});
        cc.on_epoch = [&](int stage, Model<float>& m, const TrainState& st) {
            save(out / ("stage" + std::to_string(stage) + ".checkpoint.bgnn"), m,
                 RecordKind::checkpoint, &st);
        };
        CascadeResult r = cascaded_distillation(&teacher.model, binary, train, testp, cc, sink);
        for (std::size_t i = 0; i < r.stages.size(); ++i)
            save(out / ("stage" + std::to_string(i + 1) + ".bgnn"), r.stages[i], RecordKind::deploy);
        save(out / "model.bgnn", r.stages.back(), RecordKind::deploy);
        std::cout << "wrote " << (out / "model.bgnn").string() << "\n";
        return 0;
    }

    // A single stage distilled from --model.
    const Stage stage = common.stage;
    if (stage != Stage::s1 && stage != Stage::s2 && stage != Stage::s3 && stage != Stage::direct)
        throw ConfigError("distill --stage takes 1, 2, 3 or direct");
    const ModelSpec sspec = stage_spec(binary, stage);
    TrainConfig tc = TrainConfig::for_stage(stage, common.epochs, cc.lr);
    tc.batch_size = common.batch_size;
    tc.temperature = common.temperature;
    tc.alpha = common.alpha;
    tc.lambda_lsp = common.lambda_lsp;
    tc.sim_student = common.sim_student;
    tc.sim_teacher = common.sim_teacher;
    tc.seed = common.seed;
    tc.augment = common.augment;
    tc.eval_every = common.eval_every;
    if (ts.has("milestones")) tc.milestones = common.milestones;
    if (ts.has("weight_decay")) tc.weight_decay = common.weight_decay;

    // Stage 2 (and stage 3 with teacher_init) starts from the teacher's weights.
    const bool from_teacher = stage == Stage::s2 || (stage == Stage::s3 && common.teacher_init);
    Model<float> student = from_teacher ? teacher.model : Model<float>::init(sspec, tc.seed);
    if (from_teacher) {
        if (teacher.model.spec.convs.size() != sspec.convs.size())
            throw ConfigError("teacher architecture differs from the [model] spec");
        student.spec = sspec;
        if (stage == Stage::s3)
            student.for_each_parameter([&](const std::string&, Parameter<float>& p, ParamRole role) {
                if (student.stores_binary(role)) latent_weight_maintenance(p.value);
            });
    }
    write_manifest(out, "distill", cfg, c, {{"stage", to_string(stage)}});
    TrainState state;
    auto hook = [&](Model<float>& m, const TrainState& st) {
        save(out / "checkpoint.bgnn", m, RecordKind::checkpoint, &st);
    };
    train_model(student, train, testp, tc, &teacher.model, &state, sink, hook);
    save(out / "checkpoint.bgnn", student, RecordKind::checkpoint, &state);
    save(out / "model.bgnn", student, RecordKind::deploy);
    std::cout << "wrote " << (out / "model.bgnn").string() << "\n";
    return 0;
}

int cmd_infer(const Common& c, const std::string& split) {
    Config cfg = load_config(c);
    LoadedModel lm = load(c.model_path);
    PointCloudDataset ds = load_data(cfg, lm.model.spec);
    if (!split.empty() && split != "all") ds = ds.subset(split);
    if (ds.size() == 0) throw ValueError("no clouds to classify");
    const auto pred = predict_classes(lm.model, ds);
    std::size_t ok = 0;
    std::cout << "index\tlabel\tpredicted\n";
    for (std::size_t i = 0; i < pred.size(); ++i) {
        ok += pred[i] == ds.labels[i];
        std::cout << i << '\t' << ds.labels[i] << '\t' << pred[i] << '\n';
    }
    std::cout << "accuracy\t" << std::setprecision(8)
              << static_cast<double>(ok) / static_cast<double>(ds.size()) << "\n";
    return 0;
}

int cmd_convert(const Common& c, bool force_float) {
    if (c.out.empty()) throw ConfigError("--out is required");
    LoadedModel lm = load(c.model_path);
    SaveOptions opt;
    opt.kind = RecordKind::deploy;
    opt.force_float = force_float;
    const auto bytes = save_model(lm.model, opt);
    write_file(c.out, bytes);
    std::cout << "wrote " << c.out << " (" << bytes.size() << " bytes)\n";
    return 0;
}

int cmd_bench(const Common& c, std::int64_t runs) {
    Config cfg = load_config(c);
    BenchConfig bc = BenchConfig::from_section(cfg.section("bench"));
    if (runs > 0) bc.runs = static_cast<std::size_t>(runs);
    if (c.seed >= 0) bc.seed = static_cast<std::uint64_t>(c.seed);
    const BenchReport r = run_bench(bc);
    std::cout << r.to_text();
    if (!c.out.empty()) {
        const fs::path out(c.out);
        write_manifest(out, "bench", cfg, c);
        std::ofstream(out / "bench.txt") << r.to_text();
        std::ofstream(out / "bench.tsv") << r.to_tsv();
        std::ofstream(out / "bench.json") << r.to_json() << "\n";
    }
    return 0;
}

int cmd_synth(const Common& c) {
    if (c.out.empty()) throw ConfigError("--out is required");
    Config cfg = load_config(c);
    ConfigSection d = cfg.section("data");
    if (d.get("source", "synth") != "synth") throw ConfigError("synth writes [data] source = synth");
    save_xyz_dataset(dataset_from_section(d, run_seed(cfg)), c.out);
    std::cout << "wrote " << c.out << "/manifest.tsv\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Binary graph neural networks: training, distillation, inference, benchmarks"};
    app.require_subcommand(1);
    app.set_version_flag("--version", runtime::version() + " (" + runtime::git_revision() + ")");
    Common c;
    std::string split = "all";
    bool force_float = false;
    std::int64_t runs = 0;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", c.config_path, "Config file")->check(CLI::ExistingFile);
        sub->add_option("--seed", c.seed, "Run seed (overrides [train] seed)")->check(CLI::NonNegativeNumber);
        sub->add_option("--threads", c.threads, "Kernel threads")->check(CLI::PositiveNumber);
        sub->add_option("--out", c.out, "Output directory or file");
    };
    const std::vector<std::string> stages{"base", "1", "2", "3", "direct", "scratch"};

    auto* train = app.add_subcommand("train", "Train a model ([model], [data], [train])");
    add_common(train);
    train->add_option("--data", c.data_path, "xyz dataset directory or manifest");
    train->add_option("--stage", c.stage, "base, direct or scratch")->check(CLI::IsMember(stages));
    train->add_option("--model", c.model_path, "Teacher model for --stage direct");
    train->add_option("--resume", c.resume, "Continue from a checkpoint");

    auto* distill = app.add_subcommand("distill", "Cascaded distillation from a base model");
    add_common(distill);
    distill->add_option("--data", c.data_path, "xyz dataset directory or manifest");
    distill->add_option("--model", c.model_path, "Teacher model")->required();
    distill->add_option("--stage", c.stage, "Single stage 1, 2, 3 or direct (default: all three)")
        ->check(CLI::IsMember(stages));

    auto* infer = app.add_subcommand("infer", "Classify a dataset");
    add_common(infer);
    infer->add_option("--model", c.model_path, "Model file")->required();
    infer->add_option("--data", c.data_path, "xyz dataset directory or manifest");
    infer->add_option("--split", split, "train, test or all");

    auto* convert = app.add_subcommand("convert", "Write the deployment form of a model");
    convert->add_option("--model", c.model_path, "Checkpoint or model file")->required();
    convert->add_option("--out", c.out, "Output file")->required();
    convert->add_flag("--float", force_float, "Store every tensor as f32");

    auto* bench = app.add_subcommand("bench", "Float vs binary kernel and model benchmarks");
    add_common(bench);
    bench->add_option("--runs", runs, "Timed runs per measurement (>= 30)");

    auto* synth = app.add_subcommand("synth", "Write the synthetic dataset as xyz files");
    add_common(synth);

    CLI11_PARSE(app, argc, argv);
    try {
        runtime::configure(c.threads);
        if (*train) return cmd_train(c);
        if (*distill) return cmd_distill(c);
        if (*infer) return cmd_infer(c, split);
        if (*convert) return cmd_convert(c, force_float);
        if (*bench) return cmd_bench(c, runs);
        if (*synth) return cmd_synth(c);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
