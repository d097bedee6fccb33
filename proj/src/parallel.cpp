#include "cvt/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cvt {

namespace {
std::atomic<bool> g_deterministic{false};
}

void set_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

int configure_threads_from_env() {
    if (const char* env = std::getenv("CVT_THREADS")) {
        try {
            set_threads(std::stoi(env));
        } catch (const std::exception&) {
            // unparsable value: keep the OpenMP default
        }
    }
    return max_threads();
}

void set_deterministic(bool on) { g_deterministic = on; }
bool deterministic() { return g_deterministic; }

ExecPolicy default_policy() {
    return (deterministic() || max_threads() <= 1) ? ExecPolicy::serial : ExecPolicy::parallel;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body, ExecPolicy policy) {
    if (policy == ExecPolicy::serial || n < 2) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
#ifdef _OPENMP
    std::exception_ptr first_error;
    std::mutex mu;
    const auto count = static_cast<long long>(n);
#pragma omp parallel for schedule(dynamic)
    for (long long i = 0; i < count; ++i) {
        try {
            body(static_cast<std::size_t>(i));
        } catch (...) {
            std::lock_guard lock(mu);
            if (!first_error) first_error = std::current_exception();
        }
    }
    if (first_error) std::rethrow_exception(first_error);
#else
    for (std::size_t i = 0; i < n; ++i) body(i);
#endif
}

std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    return std::mt19937_64(seq);
}

} // namespace cvt
