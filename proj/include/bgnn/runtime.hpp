#pragma once

#include <cstddef>
#include <string>

namespace bgnn::runtime {

/// Sets the kernel thread count (1 = single-threaded, deterministic) and
/// keeps large tensor buffers on the heap instead of fresh mmaps.
void configure(int threads);

/// Threads the row-parallel kernels will use.
int threads();

/// Peak resident set size in KiB (VmHWM), 0 where unavailable.
std::size_t peak_rss_kib();

std::string version();
std::string git_revision();

/// CPU model, logical core count and compiler.
std::string machine_descriptor();

}  // namespace bgnn::runtime
