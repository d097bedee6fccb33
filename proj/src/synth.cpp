#include "cvt/synth.hpp"

#include "cvt/error.hpp"
#include "cvt/parallel.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

namespace cvt {

using nlohmann::json;

namespace {

constexpr std::uint64_t kDirectionStream = 0x9e3779b97f4a7c15ull;
constexpr std::uint64_t kLayoutStream = 0xc2b2ae3d27d4eb4full;

const char* const kLanguages[] = {"en", "de", "fr", "es", "ru"};

// E[1/N] for N uniform over the token range.
double mean_inverse_tokens(const SynthConfig& c) {
    double inv = 0.0;
    for (int n = c.min_tokens; n <= c.max_tokens; ++n) inv += 1.0 / n;
    return inv / (c.max_tokens - c.min_tokens + 1);
}

struct GenerationSlot {
    long long generation_id;
    long long claim_index;
    long long generation_length;
    long long popularity;
    const char* language;
};

// Groups consecutive claims into generations of 1..15 claims sharing an entity.
std::vector<GenerationSlot> layout(const SynthConfig& c) {
    auto rng = derived_rng(c.seed, kLayoutStream);
    std::uniform_int_distribution<int> len_dist(1, 15);
    std::uniform_real_distribution<double> log_pop(0.0, 10.0);
    std::uniform_int_distribution<int> lang(0, 4);
    std::vector<GenerationSlot> slots;
    slots.reserve(c.n_claims);
    long long gen = 0;
    while (slots.size() < c.n_claims) {
        const auto len = std::min<long long>(len_dist(rng), static_cast<long long>(c.n_claims - slots.size()));
        const auto pop = static_cast<long long>(std::floor(std::exp(log_pop(rng))));
        const char* language = kLanguages[lang(rng)];
        for (long long i = 0; i < len; ++i) slots.push_back({gen, i, len, pop, language});
        ++gen;
    }
    return slots;
}

} // namespace

void SynthConfig::check() const {
    if (shape.layers < 1 || shape.hidden_dim < 1 || shape.heads < 1) throw UsageError("synth: L, d, H must be >= 1");
    if (n_claims < 1) throw UsageError("synth: n_claims must be >= 1");
    if (!(prevalence > 0.0 && prevalence < 1.0)) throw UsageError("synth: prevalence must lie in (0,1)");
    if (min_tokens < 1 || max_tokens < min_tokens) throw UsageError("synth: need 1 <= min_tokens <= max_tokens");
    for (int l : signal_layers)
        if (l < 1 || l > shape.layers) throw UsageError("synth: signal layer " + std::to_string(l) + " outside 1..L");
    if (std::set<int>(signal_layers.begin(), signal_layers.end()).size() != signal_layers.size())
        throw UsageError("synth: duplicate signal layer");
    if (!(signal_strength >= 0.0)) throw UsageError("synth: signal_strength must be >= 0");
    if (signal_strength > 0.0 && signal_layers.empty()) throw UsageError("synth: signal needs signal_layers");
    if (!(signal_fraction > 0.0 && signal_fraction <= 1.0)) throw UsageError("synth: signal_fraction must lie in (0,1]");
    if (!(noise > 0.0)) throw UsageError("synth: noise must be > 0");
    if (logprob_mean_truthful < logprob_mean_hallucinated)
        throw UsageError("synth: logprob_mean_truthful must be >= logprob_mean_hallucinated");
    if (!(logprob_std > 0.0)) throw UsageError("synth: logprob_std must be > 0");
}

json SynthConfig::to_json() const {
    return {{"L", shape.layers},
            {"d", shape.hidden_dim},
            {"H", shape.heads},
            {"n_claims", n_claims},
            {"prevalence", prevalence},
            {"min_tokens", min_tokens},
            {"max_tokens", max_tokens},
            {"signal_layers", signal_layers},
            {"signal_strength", signal_strength},
            {"signal_fraction", signal_fraction},
            {"noise", noise},
            {"logprob_mean_truthful", logprob_mean_truthful},
            {"logprob_mean_hallucinated", logprob_mean_hallucinated},
            {"logprob_std", logprob_std},
            {"dtype", dtype_name(dtype)},
            {"seed", seed},
            {"model_id", model_id},
            {"claim_prefix", claim_prefix}};
}

SynthConfig SynthConfig::from_json(const json& j) {
    if (!j.is_object()) throw UsageError("synth config must be a JSON object");
    SynthConfig c;
    const json known = c.to_json();
    for (const auto& [key, _] : j.items())
        if (!known.contains(key)) throw UsageError("synth config: unknown key '" + key + "'");
    try {
        if (j.contains("L")) c.shape.layers = j["L"].get<int>();
        if (j.contains("d")) c.shape.hidden_dim = j["d"].get<int>();
        if (j.contains("H")) c.shape.heads = j["H"].get<int>();
        if (j.contains("n_claims")) c.n_claims = j["n_claims"].get<std::size_t>();
        if (j.contains("prevalence")) c.prevalence = j["prevalence"].get<double>();
        if (j.contains("min_tokens")) c.min_tokens = j["min_tokens"].get<int>();
        if (j.contains("max_tokens")) c.max_tokens = j["max_tokens"].get<int>();
        if (j.contains("signal_layers")) c.signal_layers = j["signal_layers"].get<std::vector<int>>();
        if (j.contains("signal_strength")) c.signal_strength = j["signal_strength"].get<double>();
        if (j.contains("signal_fraction")) c.signal_fraction = j["signal_fraction"].get<double>();
        if (j.contains("noise")) c.noise = j["noise"].get<double>();
        if (j.contains("logprob_mean_truthful")) c.logprob_mean_truthful = j["logprob_mean_truthful"].get<double>();
        if (j.contains("logprob_mean_hallucinated"))
            c.logprob_mean_hallucinated = j["logprob_mean_hallucinated"].get<double>();
        if (j.contains("logprob_std")) c.logprob_std = j["logprob_std"].get<double>();
        if (j.contains("dtype")) {
            const auto dt = j["dtype"].get<std::string>();
            if (dt != "f32" && dt != "f16") throw UsageError("synth config: dtype must be f32 or f16");
            c.dtype = dt == "f16" ? HiddenDtype::f16 : HiddenDtype::f32;
        }
        if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
        if (j.contains("model_id")) c.model_id = j["model_id"].get<std::string>();
        if (j.contains("claim_prefix")) c.claim_prefix = j["claim_prefix"].get<std::string>();
    } catch (const json::exception& e) {
        throw UsageError(std::string("synth config: ") + e.what());
    }
    return c;
}

std::vector<double> signal_direction(const SynthConfig& c, int layer) {
    if (std::find(c.signal_layers.begin(), c.signal_layers.end(), layer) == c.signal_layers.end()) return {};
    auto rng = derived_rng(c.seed ^ kDirectionStream, static_cast<std::uint64_t>(layer));
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> v(c.shape.hidden_dim);
    double norm = 0.0;
    do {
        norm = 0.0;
        for (auto& x : v) {
            x = g(rng);
            norm += x * x;
        }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (auto& x : v) x /= norm;
    return v;
}

Dataset generate(const SynthConfig& c) {
    c.check();
    const Shape& s = c.shape;
    const int d = s.hidden_dim;

    std::vector<std::vector<double>> directions(s.layers + 1);
    for (int l : c.signal_layers) directions[l] = signal_direction(c, l);
    const auto slots = layout(c);

    Dataset ds;
    ds.header.model_id = c.model_id;
    ds.header.shape = s;
    ds.header.n_claims = c.n_claims;
    ds.header.dtype_hidden = c.dtype;
    ds.header.sections = section::all;
    ds.records.resize(c.n_claims);

    // One RNG stream per claim keeps generation independent of scheduling.
    parallel_for(
        c.n_claims,
        [&](std::size_t idx) {
            auto rng = derived_rng(c.seed, idx);
            std::bernoulli_distribution coin(c.prevalence);
            std::uniform_int_distribution<int> len(c.min_tokens, c.max_tokens);
            std::normal_distribution<double> gauss(0.0, 1.0);

            ClaimRecord& r = ds.records[idx];
            r.claim_id = c.claim_prefix + std::to_string(idx);
            r.label = coin(rng) ? 1 : 0;
            const int n = len(rng);
            r.n_tokens = n;
            r.shape = s;

            const auto& slot = slots[idx];
            r.meta = {{"dataset", "synthetic"},
                      {"language", slot.language},
                      {"popularity", std::to_string(slot.popularity)},
                      {"generation_id", std::to_string(slot.generation_id)},
                      {"claim_index", std::to_string(slot.claim_index)},
                      {"generation_length", std::to_string(slot.generation_length)}};

            const int k = std::max(1, static_cast<int>(std::lround(c.signal_fraction * n)));
            std::vector<int> tokens(n);
            std::iota(tokens.begin(), tokens.end(), 0);
            for (int i = 0; i < k; ++i) {
                std::uniform_int_distribution<int> pick(i, n - 1);
                std::swap(tokens[i], tokens[pick(rng)]);
            }
            std::vector<char> carries(n, 0);
            for (int i = 0; i < k; ++i) carries[tokens[i]] = 1;

            const double sign = 1.0 - 2.0 * *r.label;
            r.hidden.resize(static_cast<std::size_t>(s.layers + 1) * n * d);
            for (int l = 0; l <= s.layers; ++l) {
                const auto& v = directions[l];
                for (int i = 0; i < n; ++i) {
                    float* h = r.hidden.data() + (static_cast<std::size_t>(l) * n + i) * d;
                    const bool planted = !v.empty() && carries[i];
                    for (int j = 0; j < d; ++j) {
                        double x = c.noise * gauss(rng);
                        if (planted) x += c.signal_strength * sign * v[j];
                        h[j] = static_cast<float>(x);
                    }
                }
            }
            if (c.dtype == HiddenDtype::f16)
                for (auto& x : r.hidden) x = static_cast<float>(Eigen::half(x));

            const double m = *r.label == 0 ? c.logprob_mean_truthful : c.logprob_mean_hallucinated;
            r.token_logprobs.resize(n);
            r.token_entropy.resize(n);
            for (int i = 0; i < n; ++i) {
                r.token_logprobs[i] = std::min(0.0, m + c.logprob_std * gauss(rng));
                r.token_entropy[i] = -r.token_logprobs[i];
            }

            // Diagonal and previous-token entries of row-stochastic causal attention rows.
            r.attn_diag.assign(static_cast<std::size_t>(s.layers) * s.heads * n, 0.0f);
            r.attn_prev.assign(r.attn_diag.size(), 0.0f);
            std::uniform_real_distribution<double> unif(0.0, 1.0);
            for (int l = 0; l < s.layers; ++l)
                for (int hd = 0; hd < s.heads; ++hd) {
                    const std::size_t off = (static_cast<std::size_t>(l) * s.heads + hd) * n;
                    std::gamma_distribution<double> g_self(1.0), g_prev(1.0 + hd);
                    r.attn_diag[off] = 1.0f;
                    for (int i = 1; i < n; ++i) {
                        double self = 0.0, prev = 0.0, rest = 0.0;
                        if (i == 1) {
                            self = unif(rng);
                            prev = 1.0 - self;
                        } else {
                            std::gamma_distribution<double> g_rest(static_cast<double>(i - 1));
                            const double a = g_self(rng), b = g_prev(rng), cst = g_rest(rng);
                            rest = a + b + cst;
                            self = a / rest;
                            prev = b / rest;
                        }
                        r.attn_diag[off + i] = static_cast<float>(self);
                        r.attn_prev[off + i] = static_cast<float>(prev);
                    }
                }
        },
        default_policy());
    return ds;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double oracle_layer_auc(const SynthConfig& c, int layer) {
    if (c.signal_strength == 0.0) return 0.5;
    if (std::find(c.signal_layers.begin(), c.signal_layers.end(), layer) == c.signal_layers.end()) return 0.5;
    const double delta = 2.0 * c.signal_strength * c.signal_fraction;
    // Mean pooling over N tokens leaves noise variance sigma^2 / N.
    const double s = c.noise * std::sqrt(mean_inverse_tokens(c));
    return normal_cdf(delta / (std::sqrt(2.0) * s));
}

OracleValue oracle_sp_auc(const SynthConfig& c) {
    if (!(c.logprob_std > 0.0)) throw UsageError("oracle_sp_auc needs logprob_std > 0");
    OracleValue o;
    const double sep = c.logprob_mean_truthful - c.logprob_mean_hallucinated;
    o.auc = normal_cdf(sep / (std::sqrt(2.0 * mean_inverse_tokens(c)) * c.logprob_std));
    o.approximate = std::max(c.logprob_mean_truthful, c.logprob_mean_hallucinated) > -3.0 * c.logprob_std;
    return o;
}

} // namespace cvt
