#include "cvt/error.hpp"
#include "cvt/probes.hpp"
#include "cvt/eval.hpp"
#include "cvt/scorers.hpp"
#include "cvt/synth.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace cvt;

namespace {

SynthConfig tiny(std::uint64_t seed, std::size_t n) {
    SynthConfig c;
    c.shape = {4, 8, 2};
    c.n_claims = n;
    c.signal_layers = {2, 3};
    c.seed = seed;
    return c;
}

// -v^T mean-pooled hidden at a layer.
double oracle_direction_score(const ClaimRecord& r, const std::vector<double>& v, int layer) {
    const auto block = r.layer_states(layer);
    const int d = r.shape.hidden_dim;
    double s = 0.0;
    for (int i = 0; i < r.n_tokens; ++i)
        for (int k = 0; k < d; ++k) s += v[k] * block[i * d + k];
    return -s / r.n_tokens;
}

} // namespace

TEST_CASE("normal cdf matches numerical integration") {
    for (double x : {-3.0, -1.0, 0.0, 0.3, 1.0 / std::sqrt(2.0), 1.0, 2.236, 4.0})
        CHECK(normal_cdf(x) == doctest::Approx(oracle::normal_cdf_simpson(x)).epsilon(1e-10));
    // frozen from the Simpson oracle
    CHECK(normal_cdf(1.0 / std::sqrt(2.0)) == doctest::Approx(0.7602499389065233).epsilon(1e-12));
    CHECK(normal_cdf(1.0) == doctest::Approx(0.8413447460685429).epsilon(1e-12));
}

TEST_CASE("oracle layer auc") {
    SynthConfig c;
    CHECK(oracle_layer_auc(c, 5) == 0.5);
    double inv = 0.0;
    for (int n = 8; n <= 32; ++n) inv += 1.0 / (25.0 * n);
    CHECK(oracle_layer_auc(c, 16) == doctest::Approx(normal_cdf(1.0 / std::sqrt(2.0 * inv))).epsilon(1e-14));
    // Delta == s gives Phi(1/sqrt 2)
    c.min_tokens = c.max_tokens = 4; // s = sigma / 2
    c.noise = 2.0;                   // s = 1 = Delta
    CHECK(oracle_layer_auc(c, 16) == doctest::Approx(0.7602499389065233).epsilon(1e-12));
    c.signal_strength = 0.0;
    CHECK(oracle_layer_auc(c, 16) == 0.5);
    c.signal_strength = 50.0;
    CHECK(oracle_layer_auc(c, 16) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("oracle sp auc") {
    SynthConfig c;
    c.logprob_mean_truthful = c.logprob_mean_hallucinated = -5.0;
    CHECK(oracle_sp_auc(c).auc == 0.5);
    // separation sqrt(2) sigma_p / sqrt(N) -> Phi(1)
    c.min_tokens = c.max_tokens = 16;
    c.logprob_std = 1.0;
    c.logprob_mean_truthful = -4.0;
    c.logprob_mean_hallucinated = -4.0 - std::sqrt(2.0) / 4.0;
    const auto o = oracle_sp_auc(c);
    CHECK(o.auc == doctest::Approx(0.8413447460685429).epsilon(1e-12));
    CHECK_FALSE(o.approximate);
    c.logprob_mean_truthful = -0.5;
    CHECK(oracle_sp_auc(c).approximate);
}

TEST_CASE("generation is deterministic and valid") {
    const auto a = generate(tiny(71, 120));
    const auto b = generate(tiny(71, 120));
    CHECK(a == b);
    CHECK_FALSE(a == generate(tiny(72, 120)));
    validate_or_throw(a);
    for (const auto& r : a.records) {
        CHECK(r.n_tokens >= 8);
        CHECK(r.n_tokens <= 32);
        for (const char* key : {"dataset", "language", "popularity", "generation_id", "claim_index", "generation_length"})
            CHECK(r.meta.count(key) == 1);
        for (int i = 0; i < r.n_tokens; ++i) CHECK(r.token_entropy[i] == -r.token_logprobs[i]);
    }
    auto f16 = tiny(71, 20);
    f16.dtype = HiddenDtype::f16;
    validate_or_throw(generate(f16));
}

TEST_CASE("generation does not depend on the thread count") {
    set_deterministic(true);
    const auto serial = generate(tiny(73, 64));
    set_deterministic(false);
    CHECK(serial == generate(tiny(73, 64)));
}

TEST_CASE("prevalence") {
    auto c = tiny(74, 10000);
    c.shape = {1, 1, 1};
    c.signal_layers = {1};
    c.min_tokens = c.max_tokens = 1;
    const auto y = labels_of(generate(c));
    const double prev = std::accumulate(y.begin(), y.end(), 0.0) / y.size();
    CHECK(prev >= 0.48);
    CHECK(prev <= 0.52);
}

TEST_CASE("signal directions are unit vectors only on signal layers") {
    const auto c = tiny(75, 1);
    CHECK(signal_direction(c, 1).empty());
    const auto v = signal_direction(c, 2);
    double n = 0.0;
    for (double x : v) n += x * x;
    CHECK(n == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(signal_direction(c, 3) != v);
}

TEST_CASE("oracle-direction scorer matches the closed form") {
    SynthConfig c;
    c.shape = {3, 16, 1};
    c.signal_layers = {2};
    c.n_claims = 5000;
    c.signal_strength = 0.35;
    c.seed = 76;
    const auto ds = generate(c);
    const auto v = signal_direction(c, 2);
    std::vector<double> s;
    for (const auto& r : ds.records) s.push_back(oracle_direction_score(r, v, 2));
    CHECK(std::abs(roc_auc(s, labels_of(ds)) - oracle_layer_auc(c, 2)) <= 0.02);
}

TEST_CASE("flipping labels and negating the signal leaves probe AUCs unchanged") {
    auto c = tiny(77, 1600);
    c.signal_strength = 0.3;
    c.logprob_mean_hallucinated = c.logprob_mean_truthful;
    const auto base = generate(c);
    // With -mu the planted term for a flipped label equals the original one, so the mirrored
    // dataset is the original hidden states under flipped labels.
    auto mirrored = base;
    for (auto& r : mirrored.records) r.label = 1 - *r.label;

    auto probe_auc = [](const Dataset& ds) {
        std::vector<std::size_t> tr(1000), te(600);
        std::iota(tr.begin(), tr.end(), 0);
        std::iota(te.begin(), te.end(), 1000);
        const auto train = subset(ds, tr), test = subset(ds, te);
        const auto p = mass_mean_fit(train, 2);
        std::vector<double> s;
        for (const auto& r : test.records) s.push_back(p.hallucination_score(r));
        return roc_auc(s, labels_of(test));
    };
    const double a1 = probe_auc(base), a2 = probe_auc(mirrored);
    CHECK(a1 > 0.6);
    CHECK(std::abs(a1 - a2) < 0.03);
}

TEST_CASE("null signal gives chance-level probes") {
    auto c = tiny(78, 2000);
    c.signal_strength = 0.0;
    c.signal_layers.clear();
    const auto ds = generate(c);
    std::vector<std::size_t> tr(1000), te(1000);
    std::iota(tr.begin(), tr.end(), 0);
    std::iota(te.begin(), te.end(), 1000);
    const auto train = subset(ds, tr), test = subset(ds, te);
    const auto y = labels_of(test);

    TrainConfig cfg;
    cfg.max_epochs = 30;
    const auto mm = mass_mean_fit(train, 2);
    const auto sheeps = sheeps_fit(train, 2, cfg);
    const auto saplma = saplma_fit(train, 2, cfg);
    std::vector<double> s_mm, s_sheeps, s_saplma;
    for (const auto& r : test.records) {
        s_mm.push_back(mm.hallucination_score(r));
        s_sheeps.push_back(sheeps.hallucination_score(r));
        s_saplma.push_back(saplma.hallucination_score(r));
    }
    for (const auto& s : {s_mm, s_sheeps, s_saplma}) {
        const double auc = roc_auc(s, y);
        CHECK(auc >= 0.45);
        CHECK(auc <= 0.55);
    }
}

TEST_CASE("sp statistic tracks its oracle") {
    SynthConfig c;
    c.shape = {1, 2, 1};
    c.signal_layers = {1};
    c.n_claims = 4000;
    c.logprob_mean_truthful = -3.0;
    c.logprob_mean_hallucinated = -3.1;
    c.logprob_std = 0.8;
    c.min_tokens = c.max_tokens = 16;
    c.seed = 79;
    const auto ds = generate(c);
    std::vector<double> s;
    for (const auto& r : ds.records) s.push_back(sp_score(r));
    const auto o = oracle_sp_auc(c);
    CHECK_FALSE(o.approximate);
    CHECK(std::abs(roc_auc(s, labels_of(ds)) - o.auc) <= 0.03);
}

TEST_CASE("config json") {
    SynthConfig c;
    const auto j = c.to_json();
    CHECK(j.at("L") == 32);
    CHECK(j.at("d") == 64);
    CHECK(j.at("H") == 4);
    CHECK(j.at("min_tokens") == 8);
    CHECK(j.at("max_tokens") == 32);
    CHECK(j.at("prevalence") == 0.5);
    CHECK(j.at("signal_layers") == std::vector<int>{12, 13, 14, 15, 16, 17, 18, 19, 20});
    CHECK(j.at("signal_strength") == 1.0);
    CHECK(j.at("signal_fraction") == 0.5);
    CHECK(j.at("noise") == 1.0);
    CHECK(SynthConfig::from_json(j).to_json() == j);
    CHECK(SynthConfig::from_json(nlohmann::json::object()).to_json() == j);
    CHECK_THROWS_AS(SynthConfig::from_json({{"colour", 1}}), UsageError);
    CHECK_THROWS_AS(SynthConfig::from_json({{"dtype", "f64"}}), UsageError);
    auto bad = c;
    bad.prevalence = 1.0;
    CHECK_THROWS_AS(bad.check(), UsageError);
    bad = c;
    bad.signal_layers = {40};
    CHECK_THROWS_AS(bad.check(), UsageError);
}
