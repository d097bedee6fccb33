#pragma once

#include "cvt/claimdump.hpp"

#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace cvt::testing {

// A valid record with random contents; attention rows obey the causal constraints.
inline ClaimRecord random_record(std::mt19937_64& rng, const Shape& s, int n_tokens, const std::string& id,
                                 std::optional<int> label = std::nullopt) {
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ClaimRecord r;
    r.claim_id = id;
    r.label = label;
    r.n_tokens = n_tokens;
    r.shape = s;
    r.meta = {{"dataset", "unit"}, {"language", "en"}, {"popularity", "7"}};
    r.hidden.resize(static_cast<std::size_t>(s.layers + 1) * n_tokens * s.hidden_dim);
    for (auto& v : r.hidden) v = static_cast<float>(g(rng));
    r.token_logprobs.resize(n_tokens);
    r.token_entropy.resize(n_tokens);
    for (int i = 0; i < n_tokens; ++i) {
        r.token_logprobs[i] = std::log(0.02 + 0.98 * u(rng));
        r.token_entropy[i] = 3.0 * u(rng);
    }
    const std::size_t cells = static_cast<std::size_t>(s.layers) * s.heads * n_tokens;
    r.attn_diag.resize(cells);
    r.attn_prev.resize(cells);
    for (std::size_t c = 0; c < cells; ++c) {
        const int i = static_cast<int>(c % n_tokens);
        const double d = i == 0 ? 1.0 : u(rng);
        r.attn_diag[c] = static_cast<float>(d);
        r.attn_prev[c] = i == 0 ? 0.0f : static_cast<float>((1.0 - d) * u(rng));
    }
    return r;
}

inline Dataset random_dataset(std::uint64_t seed, const Shape& s, std::size_t n, int min_tokens = 1,
                              int max_tokens = 6, bool labeled = true) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> nt(min_tokens, max_tokens);
    Dataset ds;
    ds.header.model_id = "unit-model";
    ds.header.shape = s;
    ds.header.n_claims = n;
    for (std::size_t i = 0; i < n; ++i) {
        std::optional<int> label;
        if (labeled) label = static_cast<int>(i % 2);
        ds.records.push_back(random_record(rng, s, nt(rng), "r" + std::to_string(i), label));
    }
    return ds;
}

inline std::string temp_path(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "cvt_tests";
    std::filesystem::create_directories(dir);
    return (dir / name).string();
}

} // namespace cvt::testing
