#pragma once

// Microbenchmark harness: float reference vs binary kernel, reported as
// medians over repeated runs and as baseline/candidate ratios.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "bgnn/config.hpp"

namespace bgnn {

struct BenchConfig {
    std::size_t runs = 30;
    std::size_t warmup = 3;
    std::size_t gemm_m = 1024;
    std::size_t gemm_n = 1024;
    std::size_t gemm_k = 256;
    std::size_t pair_n = 1024;
    std::size_t pair_d = 256;
    /// Clouds per forward pass of the mini model (dgcnn40 runs one cloud).
    std::size_t mini_batch = 8;
    bool kernels = true;
    bool models = true;
    /// Model sizes benchmarked end to end (mini, dgcnn40).
    std::vector<std::string> model_sizes{"mini", "dgcnn40"};
    /// Binary variant compared against the float model of the same size.
    std::string binary_variant = "bf1";
    std::uint64_t seed = 1;

    /// Reads a [bench] section; absent keys keep the defaults.
    static BenchConfig from_section(const ConfigSection& s);
    void validate() const;
};

struct Timing {
    std::string name;
    std::vector<double> samples;  // seconds, warm-up excluded
    double median = 0.0;
    double mean = 0.0;
    double stddev = 0.0;
    double min = 0.0;
    double max = 0.0;
};

/// Times `fn` `runs` times after `warmup` untimed calls.
Timing measure(const std::string& name, const std::function<void()>& fn, std::size_t runs,
               std::size_t warmup);

struct Comparison {
    std::string name;
    std::string baseline;   // Timing name of the float reference
    std::string candidate;  // Timing name of the binary kernel
    double ratio = 0.0;     // baseline median / candidate median
};

struct BenchReport {
    std::string machine;
    std::string version;
    int threads = 1;
    std::size_t runs = 0;
    std::vector<Timing> timings;
    std::vector<Comparison> comparisons;
    /// Per forward pass: model timing name -> layer category -> median-normalised seconds.
    std::map<std::string, std::map<std::string, double>> breakdown;
    std::size_t peak_rss_kib = 0;

    const Timing& timing(const std::string& name) const;
    const Comparison& comparison(const std::string& name) const;

    std::string to_text() const;
    /// One row per timing: name, runs, median, mean, stddev, min, max.
    std::string to_tsv() const;
    std::string to_json() const;
};

/// Float vs binary GEMM at gemm_m x gemm_n x gemm_k.
void bench_gemm(const BenchConfig& cfg, BenchReport& report);
/// Float squared-l2 vs packed Hamming pairwise distances at pair_n x pair_d.
void bench_pairwise(const BenchConfig& cfg, BenchReport& report);
/// Eval-mode forward of the float and binary model of each configured size.
void bench_models(const BenchConfig& cfg, BenchReport& report);

BenchReport run_bench(const BenchConfig& cfg);

}  // namespace bgnn
