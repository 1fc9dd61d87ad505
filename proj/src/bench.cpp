#include "bgnn/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "bgnn/bitcore.hpp"
#include "bgnn/data.hpp"
#include "bgnn/gemm.hpp"
#include "bgnn/model.hpp"
#include "bgnn/model_io.hpp"
#include "bgnn/runtime.hpp"
#include "bgnn/training.hpp"

namespace bgnn {

namespace {

std::size_t positive(const ConfigSection& s, const std::string& key, std::size_t fallback) {
    const auto v = s.get_int(key, static_cast<std::int64_t>(fallback));
    if (v <= 0) throw ConfigError("bench." + key + " must be positive");
    return static_cast<std::size_t>(v);
}

// Keeps a computed value observable so the timed call is not elided.
volatile double g_sink = 0.0;

template <typename T>
void consume(const Tensor<T>& t) {
    if (!t.empty()) g_sink = g_sink + static_cast<double>(t[0]);
}

std::string fmt_seconds(double s) {
    std::ostringstream out;
    out << std::fixed;
    if (s < 1e-3)
        out << std::setprecision(2) << s * 1e6 << " us";
    else if (s < 1.0)
        out << std::setprecision(3) << s * 1e3 << " ms";
    else
        out << std::setprecision(3) << s << " s";
    return out.str();
}

}  // namespace

BenchConfig BenchConfig::from_section(const ConfigSection& s) {
    s.reject_unknown({"runs", "warmup", "gemm_m", "gemm_n", "gemm_k", "pair_n", "pair_d",
                      "mini_batch", "kernels", "models", "model_sizes", "binary_variant", "seed"});
    BenchConfig c;
    c.runs = positive(s, "runs", c.runs);
    c.warmup = static_cast<std::size_t>(std::max<std::int64_t>(0, s.get_int("warmup", 3)));
    c.gemm_m = positive(s, "gemm_m", c.gemm_m);
    c.gemm_n = positive(s, "gemm_n", c.gemm_n);
    c.gemm_k = positive(s, "gemm_k", c.gemm_k);
    c.pair_n = positive(s, "pair_n", c.pair_n);
    c.pair_d = positive(s, "pair_d", c.pair_d);
    c.mini_batch = positive(s, "mini_batch", c.mini_batch);
    c.kernels = s.get_bool("kernels", c.kernels);
    c.models = s.get_bool("models", c.models);
    if (s.has("model_sizes")) {
        c.model_sizes.clear();
        for (auto& v : split(s.get("model_sizes", ""), ','))
            if (!trim(v).empty()) c.model_sizes.push_back(trim(v));
    }
    c.binary_variant = s.get("binary_variant", c.binary_variant);
    c.seed = static_cast<std::uint64_t>(s.get_int("seed", 1));
    c.validate();
    return c;
}

void BenchConfig::validate() const {
    if (runs < 30) throw ConfigError("bench.runs must be at least 30");
    if (binary_variant != "rf" && binary_variant != "bf1" && binary_variant != "bf2")
        throw ConfigError("bench.binary_variant must be rf, bf1 or bf2");
    for (const auto& m : model_sizes)
        if (m != "mini" && m != "dgcnn40")
            throw ConfigError("bench.model_sizes: unknown size '" + m + "' (mini|dgcnn40)");
}

Timing measure(const std::string& name, const std::function<void()>& fn, std::size_t runs,
               std::size_t warmup) {
    using clock = std::chrono::steady_clock;
    for (std::size_t i = 0; i < warmup; ++i) fn();
    Timing t;
    t.name = name;
    t.samples.reserve(runs);
    for (std::size_t i = 0; i < runs; ++i) {
        const auto start = clock::now();
        fn();
        const std::chrono::duration<double> d = clock::now() - start;
        t.samples.push_back(d.count());
    }
    std::vector<double> sorted = t.samples;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    if (n == 0) return t;
    t.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    t.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(n);
    double ss = 0.0;
    for (double v : sorted) ss += (v - t.mean) * (v - t.mean);
    t.stddev = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
    t.min = sorted.front();
    t.max = sorted.back();
    return t;
}

const Timing& BenchReport::timing(const std::string& name) const {
    for (const auto& t : timings)
        if (t.name == name) return t;
    throw ValueError("bench report has no timing '" + name + "'");
}

const Comparison& BenchReport::comparison(const std::string& name) const {
    for (const auto& c : comparisons)
        if (c.name == name) return c;
    throw ValueError("bench report has no comparison '" + name + "'");
}

namespace {

void add_comparison(BenchReport& r, const std::string& name, const Timing& base,
                    const Timing& cand) {
    r.timings.push_back(base);
    r.timings.push_back(cand);
    r.comparisons.push_back({name, base.name, cand.name, base.median / cand.median});
}

}  // namespace

void bench_gemm(const BenchConfig& cfg, BenchReport& report) {
    const std::size_t m = cfg.gemm_m, n = cfg.gemm_n, k = cfg.gemm_k;
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    // A is m x k, B is k x n; the binary kernel takes B transposed (n x k).
    Tensor<float> a = Tensor<float>::matrix(m, k);
    Tensor<float> b = Tensor<float>::matrix(k, n);
    for (auto& v : a.storage()) v = u(rng);
    for (auto& v : b.storage()) v = u(rng);
    Tensor<float> bt = Tensor<float>::matrix(n, k);
    for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) bt.at(j, p) = b.at(p, j);
    const BitMatrix pa = pack_signs(a.data(), m, k);
    const BitMatrix pbt = pack_signs(bt.data(), n, k);
    Tensor<float> c = Tensor<float>::matrix(m, n);

    const std::string shape = std::to_string(m) + "x" + std::to_string(n) + "x" + std::to_string(k);
    Timing fl = measure("gemm_float_" + shape, [&] {
        gemm::nn(m, n, k, a.data(), b.data(), c.data());
        consume(c);
    }, cfg.runs, cfg.warmup);
    Timing bi = measure("gemm_binary_" + shape, [&] {
        IntMatrix r = binary_gemm_int(pa, pbt);
        consume(r);
    }, cfg.runs, cfg.warmup);
    add_comparison(report, "gemm", fl, bi);
}

void bench_pairwise(const BenchConfig& cfg, BenchReport& report) {
    const std::size_t n = cfg.pair_n, d = cfg.pair_d;
    std::mt19937_64 rng(cfg.seed + 1);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    Tensor<float> x = Tensor<float>::matrix(n, d);
    for (auto& v : x.storage()) v = u(rng);
    const BitMatrix px = pack_signs(x.data(), n, d);

    const std::string shape = std::to_string(n) + "x" + std::to_string(d);
    Timing fl = measure("pairwise_l2_" + shape, [&] { consume(pairwise_sq_l2(x)); },
                        cfg.runs, cfg.warmup);
    Timing bi = measure("pairwise_hamming_" + shape, [&] { consume(pairwise_hamming(px)); },
                        cfg.runs, cfg.warmup);
    add_comparison(report, "pairwise", fl, bi);
}

void bench_models(const BenchConfig& cfg, BenchReport& report) {
    for (const auto& size : cfg.model_sizes) {
        const ModelSpec fspec = ModelSpec::preset("float-" + size);
        const ModelSpec bspec = ModelSpec::preset(cfg.binary_variant + "-" + size);
        const std::size_t clouds = size == "mini" ? cfg.mini_batch : 1;
        const auto ds = synth_dataset({ShapeKind::sphere, ShapeKind::cube, ShapeKind::two_planes},
                                      fspec.points, clouds, 0, cfg.seed + 2);
        std::vector<std::size_t> idx(clouds);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        const Tensor<float> x = make_batch(ds, idx, fspec.points, nullptr, nullptr);

        Model<float> fmodel = Model<float>::init(fspec, cfg.seed);
        Model<float> latent = Model<float>::init(bspec, cfg.seed);
        Model<float> bmodel = deployed(latent);

        auto run = [&](Model<float>& model, const std::string& name) {
            ForwardProfile prof;
            Timing t = measure(name, [&] {
                Tape<float> tape(false);
                ForwardOptions<float> opt;
                opt.profile = &prof;
                auto r = model.forward(tape, x, opt);
                consume(tape.value(r.logits));
            }, cfg.runs, cfg.warmup);
            auto& cat = report.breakdown[name];
            const double calls = static_cast<double>(cfg.runs + cfg.warmup);
            for (const auto& [k, v] : prof.seconds) cat[k] = v / calls;
            return t;
        };
        const std::string tag = "forward_" + size;
        Timing fl = run(fmodel, tag + "_float");
        Timing bi = run(bmodel, tag + "_" + cfg.binary_variant);
        add_comparison(report, tag, fl, bi);
    }
}

BenchReport run_bench(const BenchConfig& cfg) {
    cfg.validate();
    BenchReport r;
    r.machine = runtime::machine_descriptor();
    r.version = runtime::version() + " (" + runtime::git_revision() + ")";
    r.threads = runtime::threads();
    r.runs = cfg.runs;
    if (cfg.kernels) {
        bench_gemm(cfg, r);
        bench_pairwise(cfg, r);
    }
    if (cfg.models) bench_models(cfg, r);
    r.peak_rss_kib = runtime::peak_rss_kib();
    return r;
}

std::string BenchReport::to_text() const {
    std::ostringstream out;
    out << "machine: " << machine << "\n"
        << "version: " << version << "\n"
        << "threads: " << threads << "\n"
        << "runs per timing: " << runs << " (warm-up excluded)\n\n";
    out << std::left << std::setw(34) << "timing" << std::right << std::setw(12) << "median"
        << std::setw(12) << "stddev" << std::setw(12) << "min" << std::setw(12) << "max" << "\n";
    for (const auto& t : timings) {
        out << std::left << std::setw(34) << t.name << std::right << std::setw(12)
            << fmt_seconds(t.median) << std::setw(12) << fmt_seconds(t.stddev) << std::setw(12)
            << fmt_seconds(t.min) << std::setw(12) << fmt_seconds(t.max) << "\n";
    }
    out << "\nratios (baseline median / candidate median):\n";
    for (const auto& c : comparisons) {
        out << "  " << std::left << std::setw(14) << c.name << std::right << std::fixed
            << std::setprecision(2) << std::setw(8) << c.ratio << "x   " << c.baseline << " / "
            << c.candidate << "\n";
    }
    if (!breakdown.empty()) {
        out << "\nper-category time per forward pass:\n";
        for (const auto& [model, cats] : breakdown) {
            double total = 0.0;
            for (const auto& [k, v] : cats) total += v;
            out << "  " << model << "\n";
            for (const auto& [k, v] : cats) {
                out << "    " << std::left << std::setw(12) << k << std::right << std::setw(12)
                    << fmt_seconds(v) << std::setw(8) << std::fixed << std::setprecision(1)
                    << (total > 0 ? 100.0 * v / total : 0.0) << " %\n";
            }
        }
    }
    if (peak_rss_kib) out << "\npeak memory: " << peak_rss_kib << " KiB\n";
    return out.str();
}

std::string BenchReport::to_tsv() const {
    std::ostringstream out;
    out << "name\truns\tmedian_s\tmean_s\tstddev_s\tmin_s\tmax_s\n";
    out << std::setprecision(9);
    for (const auto& t : timings) {
        out << t.name << '\t' << t.samples.size() << '\t' << t.median << '\t' << t.mean << '\t'
            << t.stddev << '\t' << t.min << '\t' << t.max << '\n';
    }
    return out.str();
}

std::string BenchReport::to_json() const {
    nlohmann::json j;
    j["machine"] = machine;
    j["version"] = version;
    j["threads"] = threads;
    j["runs"] = runs;
    j["peak_rss_kib"] = peak_rss_kib;
    for (const auto& t : timings) {
        j["timings"].push_back({{"name", t.name},
                                {"median_s", t.median},
                                {"mean_s", t.mean},
                                {"stddev_s", t.stddev},
                                {"variance_s2", t.stddev * t.stddev},
                                {"min_s", t.min},
                                {"max_s", t.max},
                                {"samples_s", t.samples}});
    }
    for (const auto& c : comparisons) {
        j["comparisons"].push_back({{"name", c.name},
                                    {"baseline", c.baseline},
                                    {"candidate", c.candidate},
                                    {"ratio", c.ratio}});
    }
    j["breakdown_s"] = breakdown;
    return j.dump(2);
}

}  // namespace bgnn
