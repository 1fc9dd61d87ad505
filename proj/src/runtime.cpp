#include "bgnn/runtime.hpp"

#include <malloc.h>

#include <fstream>
#include <sstream>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

#ifndef BGNN_VERSION
#define BGNN_VERSION "unknown"
#endif
#ifndef BGNN_GIT_REV
#define BGNN_GIT_REV "unknown"
#endif

namespace bgnn::runtime {

void configure(int threads) {
    // Tape values of a few MB each are allocated and freed every step.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#ifdef _OPENMP
    omp_set_dynamic(0);
    omp_set_num_threads(threads < 1 ? 1 : threads);
#else
    (void)threads;
#endif
}

int threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

std::size_t peak_rss_kib() {
    std::ifstream in("/proc/self/status");
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind("VmHWM:", 0) == 0) {
            std::istringstream ss(line.substr(6));
            std::size_t kib = 0;
            ss >> kib;
            return kib;
        }
    }
    return 0;
}

std::string version() { return BGNN_VERSION; }
std::string git_revision() { return BGNN_GIT_REV; }

std::string machine_descriptor() {
    std::string cpu = "unknown cpu";
    std::ifstream in("/proc/cpuinfo");
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind("model name", 0) == 0) {
            const auto colon = line.find(':');
            if (colon != std::string::npos) cpu = line.substr(colon + 2);
            break;
        }
    }
    std::ostringstream out;
    out << cpu << ", " << std::thread::hardware_concurrency() << " logical cores";
#if defined(__clang__)
    out << ", clang " << __clang_major__ << "." << __clang_minor__;
#elif defined(__GNUC__)
    out << ", gcc " << __GNUC__ << "." << __GNUC_MINOR__;
#endif
    return out.str();
}

}  // namespace bgnn::runtime
