#pragma once

// Thread control for the OpenMP kernels.
//
// Every parallel kernel in this library has a serial reference twin that is kept for
// testing and benchmarking. Parallel kernels never reduce across threads in a
// schedule-dependent order, so both paths produce bit-identical results; deterministic
// mode additionally forces the serial path.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>

namespace cvt {

enum class ExecPolicy { serial, parallel };

void set_threads(int n);
int max_threads();
// Reads CVT_THREADS when no explicit count is given; returns the count in effect.
int configure_threads_from_env();

void set_deterministic(bool on);
bool deterministic();

// Policy honoring deterministic mode and the thread count.
ExecPolicy default_policy();

// Runs body(i) for i in [0, n). Iterations must be independent.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body, ExecPolicy policy);

// Independent RNG stream for work item `index` under a base seed.
std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t index);

} // namespace cvt
