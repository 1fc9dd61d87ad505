// Acceptance run: one PASS/FAIL line per criterion, exit status 1 on any FAIL.
//
//   acceptance --group fast|training|all

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "bgnn/bench.hpp"
#include "bgnn/model_io.hpp"
#include "bgnn/runtime.hpp"
#include "bgnn/training.hpp"
#include "support.hpp"

using namespace bgnn;
namespace fs = std::filesystem;

namespace {

using clock_type = std::chrono::steady_clock;

double seconds_since(clock_type::time_point t0) {
    return std::chrono::duration<double>(clock_type::now() - t0).count();
}

int g_failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
    std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
    if (!pass) ++g_failures;
}

template <typename... Args>
std::string fmt(const char* f, Args... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

/// Sizes mostly small so the naive oracles stay cheap; every 50th case is the
/// largest shape.
std::size_t pick(std::mt19937_64& rng, std::size_t c, std::size_t hi, std::size_t small) {
    return c % 50 == 0 ? hi : test::uniform(rng, 1, small);
}

void kernel_exactness() {
    const auto t0 = clock_type::now();
    std::mt19937_64 rng(1001);
    std::size_t gemm_cases = 0, pair_cases = 0, mismatches = 0;
    for (std::size_t c = 0; c < 1000; ++c) {
        const std::size_t m = pick(rng, c, 256, 64), n = pick(rng, c, 256, 64),
                          d = pick(rng, c, 1024, 1024);
        const auto a = test::random_pm1<float>(m, d, rng);
        const auto bt = test::random_pm1<float>(n, d, rng);
        const auto alpha = test::random_normal<float>({n}, rng);
        const auto got = binary_gemm(pack(a), pack(bt), RescaleTensor<float>::channel_wise(alpha));
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                float s = 0.f;
                for (std::size_t k = 0; k < d; ++k) s += a.at(i, k) * bt.at(j, k);
                mismatches += got.at(i, j) != s * alpha[j];
            }
        ++gemm_cases;
    }
    for (std::size_t c = 0; c < 1000; ++c) {
        const std::size_t n = pick(rng, c, 256, 64), d = pick(rng, c, 1024, 1024);
        const auto x = test::random_pm1<float>(n, d, rng);
        const BitMatrix px = pack(x);
        const auto got = pairwise_hamming(px);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                std::int64_t h = 0;
                for (std::size_t k = 0; k < d; ++k) h += px.bit(i, k) != px.bit(j, k);
                mismatches += got.at(i, j) != h;
            }
        ++pair_cases;
    }
    const double secs = seconds_since(t0);
    report("kernel_exactness", mismatches == 0 && secs < 60.0,
           fmt("%zu gemm + %zu pairwise cases up to 256x1024, %zu mismatches, %.1f s (limit 60 s)",
               gemm_cases, pair_cases, mismatches, secs));
}

void hamming_identities() {
    std::mt19937_64 rng(1002);
    std::size_t bad = 0;
    const std::size_t pairs = 2000;
    for (std::size_t c = 0; c < pairs; ++c) {
        const std::size_t d = test::uniform(rng, 1, 1024);
        const auto x = test::random_pm1<double>(1, d, rng);
        const auto y = test::random_pm1<double>(1, d, rng);
        const auto px = pack(x), py = pack(y);
        const std::int64_t h = hamming_distance(px.row(0), py.row(0));
        const std::int64_t dot = xnor_dot(px.row(0), py.row(0));
        double half_sum = 0.0;
        for (std::size_t k = 0; k < d; ++k) half_sum += 1.0 - x.at(0, k) * y.at(0, k);
        half_sum *= 0.5;
        bad += 2 * h != static_cast<std::int64_t>(d) - dot;
        bad += static_cast<double>(h) != half_sum;
        bad += h != test::hamming_pm1(x, 0, y, 0);
    }
    report("hamming_identities", bad == 0,
           fmt("%zu random pairs, d up to 1024, %zu disagreements", pairs, bad));
}

void ordering_equivalence() {
    std::mt19937_64 rng(1003);
    std::size_t bad = 0;
    for (std::size_t c = 0; c < 200; ++c) {
        const std::size_t n = test::uniform(rng, 2, 128), d = test::uniform(rng, 1, 256);
        const std::size_t k = test::uniform(rng, 1, n - 1);
        const auto x = test::random_pm1<float>(n, d, rng);
        bad += !(knn_from_scores(knn_score_matmul(x), k) == knn_hamming(pack(x), k));
    }
    report("ordering_equivalence", bad == 0,
           fmt("200 random binary sets (n <= 128, d <= 256), %zu list mismatches", bad));
}

/// Central differences of the cross-entropy of `m` against its analytic
/// gradients. Graph topologies are frozen after a first forward pass. Steps much
/// larger than 1e-6 straddle max/ReLU kinks of parameters shared by many edges.
test::GradCheck model_grad_check(Model<double>& m, const Tensor<double>& x, std::span<const int> labels,
                                 const std::function<bool(ParamRole)>& include,
                                 std::size_t samples, std::mt19937_64& rng, double eps) {
    ForwardOptions<double> opt;
    opt.training = true;
    opt.allow_packed = false;
    std::vector<GraphTopology> topos;
    {
        Tape<double> t(false);
        topos = m.forward(t, x, opt).topologies;
    }
    opt.fixed_topologies = &topos;
    auto loss = [&](bool grad) {
        Tape<double> t(grad);
        auto r = m.forward(t, x, opt);
        const Var l = ad::cross_entropy(t, r.logits, labels);
        if (grad) backward(m, t, l);
        return t.value(l)[0];
    };
    loss(true);
    test::GradCheck out;
    m.for_each_parameter([&](const std::string& name, Parameter<double>& p, ParamRole role) {
        if (!include(role)) return;
        const Tensor<double> analytic = p.grad;
        std::vector<std::size_t> idx(p.value.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::shuffle(idx.begin(), idx.end(), rng);
        if (idx.size() > samples) idx.resize(samples);
        for (auto i : idx) {
            const double keep = p.value[i];
            p.value[i] = keep + eps;
            const double up = loss(false);
            p.value[i] = keep - eps;
            const double down = loss(false);
            p.value[i] = keep;
            const double numeric = (up - down) / (2 * eps);
            const double e = test::rel_error(analytic[i], numeric);
            ++out.checked;
            if (e > out.max_rel_error) {
                out.max_rel_error = e;
                out.worst = name + "[" + std::to_string(i) + "] analytic " + std::to_string(analytic[i]) +
                            " numeric " + std::to_string(numeric);
            }
        }
    });
    return out;
}

/// Moves the non-weight parameters away from their initial values so every
/// factor contributes to the gradients.
void perturb(Model<double>& m, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 0.2);
    m.for_each_parameter([&](const std::string&, Parameter<double>& p, ParamRole role) {
        if (role == ParamRole::weight_binary || role == ParamRole::weight_real) return;
        for (auto& v : p.value.storage()) v += n(rng);
    });
}

void gradient_checks() {
    std::mt19937_64 rng(1004);
    const std::size_t points = 64, clouds = 2;
    const auto x = test::random_normal<double>({clouds * points, 3}, rng, 0.5);
    const std::vector<int> labels{0, 2};
    auto all = [](ParamRole) { return true; };
    auto real_factors = [](ParamRole r) {
        return r == ParamRole::rescale || r == ParamRole::bn_scale || r == ParamRole::bn_shift ||
               r == ParamRole::prelu;
    };
    double worst = 0.0;
    std::size_t checked = 0;
    std::string where;
    auto run = [&](const std::string& label, ModelSpec spec, bool binarized_weights) {
        spec.points = points;
        spec.act_quant = spec.binary() ? Quantizer::tanh : Quantizer::identity;
        spec.weight_quant = !spec.binary() ? Quantizer::identity
                            : binarized_weights ? Quantizer::sign : Quantizer::tanh;
        auto m = Model<float>::init(spec, 11).cast<double>();
        perturb(m, rng);
        const auto r = model_grad_check(m, x, labels, binarized_weights ? real_factors : all, 12, rng, 1e-6);
        checked += r.checked;
        if (r.max_rel_error >= worst) {
            worst = r.max_rel_error;
            where = label + " " + r.worst;
        }
    };
    for (const char* v : {"float", "rf", "bf1", "bf2"}) run(std::string(v) + "-mini surrogate", ModelSpec::preset(std::string(v) + "-mini"), false);
    for (const char* v : {"rf", "bf1", "bf2"}) {
        run(std::string(v) + "-mini sign weights", ModelSpec::preset(std::string(v) + "-mini"), true);
        auto r1 = ModelSpec::preset(std::string(v) + "-mini");
        r1.rescale = RescaleKind::rank1_per_mode;
        run(std::string(v) + "-mini rank-1 sign weights", r1, true);
    }
    report("gradient_checks", worst <= 1e-3,
           fmt("%zu sampled elements over 10 models, max relative error %.2e (limit 1e-3); worst %s",
               checked, worst, where.c_str()));
}

void operator_closure() {
    std::mt19937_64 rng(1005);
    const std::size_t n = 64, k = 8, d = 64;
    Tensor<float> x = test::random_pm1<float>(n, d, rng);
    BitMatrix packed = pack(x);
    bool closed = true, agree = true;
    for (int l = 0; l < 4; ++l) {
        const auto kind = l % 2 ? LayerKind::xoredgeconv_bf2 : LayerKind::xoredgeconv_bf1;
        LayerFlags f;
        f.activation = Activation::prelu;
        auto p = make_layer<float>(kind, d, d, f, RescaleKind::channel_wise, 0, 0, false, rng);
        std::normal_distribution<float> nd(0.f, 0.5f);
        for (auto* b : {&p.bn_node, &p.bn_edge, &p.bn_out})
            for (auto& v : b->state.running_mean.storage()) v = nd(rng);
        for (auto& v : p.alpha.value.storage()) v = nd(rng);
        const auto topo = knn_hamming(packed, k);
        Tape<float> t(false);
        LayerContext<float> ctx;
        ctx.act_quant = ctx.weight_quant = Quantizer::sign;
        ctx.allow_packed = false;
        x = t.value(layer::graph_forward(t, t.constant(x), topo, p, ctx));
        for (float v : x.storage()) closed &= v == 1.f || v == -1.f;
        packed = xoredgeconv(packed, topo, p);
        agree &= unpack<float>(packed) == x;
    }
    report("operator_closure", closed && agree,
           fmt("4 XorEdgeConv layers (BF1/BF2 alternating), outputs in {-1,+1}: %s, packed path identical: %s",
               closed ? "yes" : "no", agree ? "yes" : "no"));
}

void model_size() {
    const auto spec = stage_spec(ModelSpec::preset("bf1-dgcnn40"), Stage::s3);
    auto m = Model<float>::init(spec, 12);
    SaveOptions f;
    f.force_float = true;
    const std::size_t binary = save_model(m).size(), full = save_model(m, f).size();
    const double ratio = static_cast<double>(full) / static_cast<double>(binary);
    report("model_size", binary * 10 <= full,
           fmt("stage-3 bf1-dgcnn40 %zu bytes vs float %zu bytes, %.1fx smaller (need >= 10x)", binary,
               full, ratio));
}

void kernel_speed() {
    BenchConfig cfg;
    cfg.models = false;
    cfg.runs = 30;
    const auto r = run_bench(cfg);
    const double g = r.comparison("gemm").ratio, p = r.comparison("pairwise").ratio;
    report("kernel_speed", g >= 2.0 && p >= 4.0,
           fmt("pairwise hamming %.2fx vs float l2 at 1024x256 (need 4x); binary gemm %.2fx vs float "
               "gemm at 1024x1024x256 (need 2x); median of %zu runs, %d thread",
               p, g, cfg.runs, runtime::threads()));
}

void distillation_sanity() {
    std::mt19937_64 rng(1006);
    const auto logits = test::random_normal<double>({8, 5}, rng, 2.0);
    const std::vector<int> labels{0, 1, 2, 3, 4, 0, 1, 2};
    const double kd = logit_matching_loss(logits, logits, 3.0, 1.0, labels);
    auto shifted = logits;
    shifted[3] += 0.5;
    const double kd_off = logit_matching_loss(shifted, logits, 3.0, 1.0, labels);

    const auto feats = test::random_normal<double>({40, 16}, rng, 0.3);
    const auto topo = knn_l2(feats, 6);
    const double lsp_same = lsp_loss(feats, feats, topo, topo);
    auto noisy = feats;
    for (auto& v : noisy.storage()) v += 0.1 * std::normal_distribution<double>(0.0, 1.0)(rng);
    const double lsp_off = lsp_loss(noisy, feats, topo, topo);
    const auto bits = test::random_pm1<double>(40, 16, rng);
    const auto btopo = knn_hamming(pack(bits), 6);
    const double lsp_bin = lsp_loss(bits, bits, btopo, btopo, Similarity::hamming, Similarity::hamming);

    const bool pass = std::abs(kd) <= 1e-9 && kd_off > 0.0 && std::abs(lsp_same) <= 1e-9 &&
                      std::abs(lsp_bin) <= 1e-9 && lsp_off > 0.0;
    report("distillation_sanity", pass,
           fmt("KD term equal logits %.1e, perturbed %.3e; LSP identical %.1e (hamming %.1e), perturbed %.3e",
               kd, kd_off, lsp_same, lsp_bin, lsp_off));
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string("\"") + BGNN_CLI + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

void reproducibility() {
    const fs::path dir = fs::temp_directory_path() / "bgnn_acceptance_repro";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::vector<std::pair<std::string, std::string>> configs{
        {"float", "[model]\npreset = float-mini\npoints = 64\n"
                  "[data]\ntrain_per_class = 10\ntest_per_class = 2\n"
                  "[train]\nepochs = 2\nbatch_size = 8\nseed = 21\naugment = true\n"},
        {"bf1", "[model]\npreset = bf1-mini\npoints = 64\n"
                "[data]\ntrain_per_class = 10\ntest_per_class = 2\n"
                "[train]\nstage = scratch\nepochs = 2\nbatch_size = 8\nseed = 22\naugment = true\n"}};
    bool ok = true;
    std::string detail;
    for (const auto& [name, text] : configs) {
        std::ofstream(dir / (name + ".ini")) << text;
        std::vector<std::uint8_t> files[2];
        for (int r = 0; r < 2; ++r) {
            const fs::path out = dir / (name + std::to_string(r));
            const int rc = run_cli("train --threads 1 --config \"" + (dir / (name + ".ini")).string() +
                                       "\" --out \"" + out.string() + "\"",
                                   dir / (name + std::to_string(r) + ".log"));
            if (rc != 0) {
                ok = false;
                detail += name + ": train exited with " + std::to_string(rc) + "; ";
                continue;
            }
            files[r] = read_file((out / "model.bgnn").string());
        }
        const bool same = !files[0].empty() && files[0] == files[1];
        ok &= same;
        detail += name + " model files " + (same ? "identical" : "differ") + " (" +
                  std::to_string(files[0].size()) + " bytes); ";
    }
    fs::remove_all(dir);
    report("reproducibility", ok, "two single-thread train runs per config: " + detail);
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void desk_training() {
    const auto t0 = clock_type::now();
    const std::vector<ShapeKind> kinds{ShapeKind::sphere, ShapeKind::cube, ShapeKind::two_planes};
    std::vector<double> acc_float, acc_rf, acc_bf1;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto ds = synth_dataset(kinds, 128, 300, 60, seed);
        const auto train = ds.subset("train"), test = ds.subset("test");
        auto base = Model<float>::init(ModelSpec::preset("float-mini"), seed);
        TrainConfig cfg = TrainConfig::for_stage(Stage::base, 5, 1e-3);
        cfg.batch_size = 16;
        cfg.seed = seed;
        train_model(base, train, nullptr, cfg, nullptr);
        acc_float.push_back(evaluate(base, test));

        CascadeConfig cc;
        cc.epochs_s1 = 2;
        cc.epochs_s2 = 3;
        cc.epochs_s3 = 5;
        cc.lr = 1e-2;
        cc.common = cfg;
        for (const char* v : {"rf", "bf1"}) {
            auto r = cascaded_distillation(&base, ModelSpec::preset(std::string(v) + "-mini"), train,
                                           nullptr, cc);
            (std::string(v) == "rf" ? acc_rf : acc_bf1).push_back(evaluate(r.stages.back(), test));
        }
        std::cout << fmt("  seed %llu: float %.3f  rf %.3f  bf1 %.3f  (%.0f s elapsed)",
                         static_cast<unsigned long long>(seed), acc_float.back(), acc_rf.back(),
                         acc_bf1.back(), seconds_since(t0))
                  << std::endl;
    }
    const double f = median(acc_float), r = median(acc_rf), b = median(acc_bf1);
    const double secs = seconds_since(t0);
    report("desk_training", f >= 0.95 && b >= 0.70 && r >= 0.85 && secs <= 1800.0,
           fmt("median test accuracy over 5 seeds: float %.3f (need 0.95, 5 epochs), stage-3 bf1 %.3f "
               "(need 0.70), stage-3 rf %.3f (need 0.85); %.0f s (limit 1800 s)",
               f, b, r, secs));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks"};
    std::string group = "all";
    app.add_option("--group", group, "fast, training or all")
        ->check(CLI::IsMember({"fast", "training", "all"}));
    CLI11_PARSE(app, argc, argv);
    runtime::configure(1);
    std::cout << "machine: " << runtime::machine_descriptor() << "\n"
              << "version: " << runtime::version() << " (" << runtime::git_revision() << ")\n";

    if (group != "training") {
        kernel_exactness();
        hamming_identities();
        ordering_equivalence();
        gradient_checks();
        operator_closure();
        model_size();
        kernel_speed();
        distillation_sanity();
        reproducibility();
    }
    if (group != "fast") desk_training();
    return g_failures == 0 ? 0 : 1;
}
