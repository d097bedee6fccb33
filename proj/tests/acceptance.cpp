// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include "cvt/claimdump.hpp"
#include "cvt/error.hpp"
#include "cvt/eval.hpp"
#include "cvt/intra.hpp"
#include "cvt/pipeline.hpp"
#include "cvt/probes.hpp"
#include "cvt/scorers.hpp"
#include "cvt/synth.hpp"
#include "oracles.hpp"
#include "support.hpp"

#include <Eigen/Core>
#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>

using namespace cvt;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Timer {
    std::clock_t cpu0 = std::clock();
    std::chrono::steady_clock::time_point wall0 = std::chrono::steady_clock::now();
    double cpu() const { return static_cast<double>(std::clock() - cpu0) / CLOCKS_PER_SEC; }
    double wall() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
    }
};

int failures = 0;

void report(const std::string& name, const Outcome& o, double seconds) {
    if (!o.pass) ++failures;
    std::printf("%s  %-34s %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), seconds);
    std::fflush(stdout);
}

// Runs a criterion with a CPU-time budget (0 = none); exceptions count as failures.
void run(const std::string& name, double budget, const std::function<Outcome()>& body) {
    Timer t;
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double used = t.cpu();
    if (budget > 0 && used >= budget) {
        o.pass = false;
        o.detail += " over budget " + std::to_string(budget) + " s";
    }
    report(name, o, used);
}

std::string fmt(double v, int prec = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

std::string sci(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2e", v);
    return buf;
}

std::vector<char> slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void spit(const std::string& path, const std::vector<char>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

bool read_fails(const std::string& path) {
    try {
        read_dump(path);
    } catch (const DataError&) {
        return true;
    }
    return false;
}

// ---------------------------------------------------------------------------------------

Outcome metric_oracles() {
    std::mt19937_64 rng(101);
    double worst_roc = 0.0, worst_pr = 0.0;
    for (int inst = 0; inst < 500; ++inst) {
        const int n = std::uniform_int_distribution<int>(2, 200)(rng);
        const int levels = std::uniform_int_distribution<int>(2, 30)(rng); // few levels -> ties
        std::vector<double> s(n);
        std::vector<int> y(n);
        for (int i = 0; i < n; ++i) {
            s[i] = std::uniform_int_distribution<int>(0, levels)(rng) / 7.0;
            y[i] = static_cast<int>(rng() % 2);
        }
        y[0] = 0;
        y[1] = 1;
        worst_roc = std::max(worst_roc, std::abs(roc_auc(s, y) - oracle::auc_pairwise(s, y)));
        worst_pr = std::max(worst_pr, std::abs(pr_auc(s, y) - oracle::ap_sweep(s, y)));
    }
    return {worst_roc <= 1e-12 && worst_pr <= 1e-12,
            "max |roc - oracle| = " + sci(worst_roc) + ", max |pr - oracle| = " + sci(worst_pr)};
}

std::vector<double> random_params(std::mt19937_64& rng, std::size_t n, double scale) {
    std::normal_distribution<double> g(0.0, scale);
    std::vector<double> p(n);
    for (auto& v : p) v = g(rng);
    return p;
}

double gradient_error(const ProbeObjective& obj, std::mt19937_64& rng, double scale) {
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        const auto params = random_params(rng, obj.n_params(), scale);
        std::vector<double> grad(params.size());
        obj.evaluate(params, grad, ExecPolicy::serial);
        const auto fd = oracle::finite_difference(
            [&](const std::vector<double>& p) { return obj.evaluate(p, {}, ExecPolicy::serial); }, params, 1e-5);
        worst = std::max(worst, oracle::max_relative_error(grad, fd));
    }
    return worst;
}

Outcome gradients() {
    std::mt19937_64 rng(102);
    SynthConfig c;
    c.shape = {3, 12, 1};
    c.n_claims = 60;
    c.signal_layers = {2};
    c.min_tokens = 2;
    c.max_tokens = 10;
    c.seed = 102;
    const auto ds = generate(c);
    std::string detail;
    double worst = 0.0;
    for (auto pooling : {Pooling::learned_attention, Pooling::mean, Pooling::last_token}) {
        const ProbeObjective obj(ds, 2, pooling, 1e-3);
        const double e = gradient_error(obj, rng, 0.5);
        worst = std::max(worst, e);
        detail += pooling_name(pooling) + " " + sci(e) + ", ";
    }
    // SATRMD head on standardized relative-distance features of the same data
    TrainConfig tc;
    tc.max_epochs = 3;
    const auto model = satrmd_fit(ds, tc);
    std::vector<std::vector<double>> x;
    std::vector<double> t;
    for (const auto& r : ds.records) {
        auto f = satrmd_features(r, model.stats);
        for (std::size_t k = 0; k < f.size(); ++k) f[k] = (f[k] - model.feature_mean[k]) / model.feature_scale[k];
        x.push_back(std::move(f));
        t.push_back(1.0 - *r.label);
    }
    const ProbeObjective head(x, t, 1e-3);
    const double e = gradient_error(head, rng, 1.0);
    worst = std::max(worst, e);
    detail += "satrmd head " + sci(e);
    return {worst < 1e-4, "max rel err: " + detail};
}

// One generation split by index: directions are tied to the seed.
struct SynthSplit {
    SynthConfig config;
    Dataset train, test;
};

SynthSplit default_synth() {
    SynthSplit s;
    s.config.n_claims = 5000;
    s.config.seed = 7;
    const auto all = generate(s.config);
    std::vector<std::size_t> a(4000), b(1000);
    std::iota(a.begin(), a.end(), 0);
    std::iota(b.begin(), b.end(), 4000);
    s.train = subset(all, a);
    s.test = subset(all, b);
    return s;
}

double test_auc(const Dataset& test, const std::function<double(const ClaimRecord&)>& score) {
    std::vector<double> s;
    for (const auto& r : test.records) s.push_back(score(r));
    return roc_auc(s, labels_of(test));
}

Outcome intra_recovery(const SynthSplit& data) {
    IntraConfig ic;
    ic.seed = 7;
    ic.train.seed = 7;
    const auto model = fit_intra(data.train, ic);
    const double intra = test_auc(data.test, [&](const ClaimRecord& r) { return model.hallucination_score(r); });

    std::vector<int> all_layers(data.config.shape.layers + 1);
    std::iota(all_layers.begin(), all_layers.end(), 0);
    const auto probes = train_layer_probes(data.train, all_layers, ic.train);
    double best = 0.0, best_oracle = 0.0;
    int best_layer = -1;
    for (const auto& p : probes) {
        const double a = test_auc(data.test, [&](const ClaimRecord& r) { return p.hallucination_score(r); });
        if (a > best) best = a, best_layer = p.layer;
        best_oracle = std::max(best_oracle, oracle_layer_auc(data.config, p.layer));
    }
    const bool pass = intra >= best - 0.01 && intra >= 0.9 * best_oracle;
    return {pass, "INTRA " + fmt(intra) + ", best single layer " + std::to_string(best_layer) + " " + fmt(best) +
                      ", oracle " + fmt(best_oracle)};
}

Outcome layer_ablation(const SynthSplit& data) {
    AblationOptions ao;
    ao.intra.seed = 7;
    ao.intra.train.seed = 7;
    ao.n_resamples = 200;
    const auto rows = ablate_intra(data.train, data.test, parse_layer_ranges("0-8,11-22,24-32,16"), ao);
    const double low = rows[0].roc_auc, mid = rows[1].roc_auc, high = rows[2].roc_auc, single = rows[3].roc_auc;
    const bool a = mid - low >= 0.05, b = mid - high >= 0.05, c = mid - single >= 0.005;
    std::string detail = "0-8 " + fmt(low) + ", 11-22 " + fmt(mid) + ", 24-32 " + fmt(high) + ", 16 " + fmt(single);
    detail += std::string("; vs 0-8 ") + (a ? "ok" : "short") + ", vs 24-32 " + (b ? "ok" : "short") +
              ", vs 16 margin " + fmt(mid - single) + (c ? " ok" : " < 0.005");
    return {a && b && c, detail};
}

Outcome rauq_degeneracy() {
    std::mt19937_64 rng(104);
    const Shape s{4, 3, 3};
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
        const auto r = testing::random_record(rng, s, 1 + static_cast<int>(rng() % 40), "r");
        RauqConfig c;
        c.alpha = 1.0;
        c.layer_set = {1, 2, 3, 4};
        for (int l : c.layer_set) c.selected_heads[l] = static_cast<int>(rng() % 3);
        worst = std::max(worst, std::abs(rauq_score(r, c) - std::log(ppl_score(r))));
    }
    return {worst <= 1e-12, "max |rauq - log ppl| = " + sci(worst)};
}

Outcome quantile_normalizer() {
    std::mt19937_64 rng(105);
    std::normal_distribution<double> g(0.0, 1.0);
    const std::size_t m = 500;
    std::vector<double> calib(m);
    for (auto& v : calib) v = g(rng);
    for (std::size_t i = 0; i < 50; ++i) calib[i] = calib[i + 50]; // ties
    const QuantileNormalizer q(calib);

    int violations = 0;
    bool in_range = true;
    std::normal_distribution<double> wide(0.0, 2.0);
    for (int k = 0; k < 1000; ++k) {
        double a = wide(rng), b = wide(rng);
        if (a > b) std::swap(a, b);
        if (q(a) > q(b)) ++violations;
        for (double v : {q(a), q(b)}) in_range = in_range && v > 0.0 && v < 1.0;
    }
    std::vector<double> u;
    for (double v : calib) u.push_back(q(v));
    std::sort(u.begin(), u.end());
    double ks = 0.0;
    const double mm = static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
        ks = std::max({ks, std::abs((i + 1) / mm - u[i]), std::abs(i / mm - u[i])});
    // a tied pair attains 1/M exactly, so allow only rounding slack
    return {violations == 0 && in_range && ks <= 1.0 / mm + 1e-12,
            std::to_string(violations) + " order violations, range ok " + (in_range ? "yes" : "no") + ", KS " +
                fmt(ks, 5) + " (1/M = " + fmt(1.0 / mm, 5) + ")"};
}

Outcome bootstrap() {
    std::mt19937_64 rng(106);
    std::normal_distribution<double> g(0.0, 1.0);
    const double shift = 1.0;
    const double population_auc = normal_cdf(shift / std::sqrt(2.0));

    auto sample = [&](std::size_t n) {
        std::pair<std::vector<double>, std::vector<int>> out;
        for (std::size_t i = 0; i < n; ++i) {
            const int y = static_cast<int>(i % 2);
            out.first.push_back(g(rng) + shift * y);
            out.second.push_back(y);
        }
        return out;
    };

    const auto [s0, y0] = sample(150);
    const auto a = bootstrap_ci(s0, y0, Metric::roc_auc, 2000, 0.95, 9, ExecPolicy::serial);
    const auto b = bootstrap_ci(s0, y0, Metric::roc_auc, 2000, 0.95, 9, ExecPolicy::parallel);
    const auto c = bootstrap_ci(s0, y0, Metric::roc_auc, 2000, 0.95, 9);
    const bool deterministic = a.lo == b.lo && a.hi == b.hi && a.lo == c.lo && a.hi == c.hi;

    int covered = 0;
    const int trials = 200;
    for (int t = 0; t < trials; ++t) {
        const auto [s, y] = sample(200);
        const auto ci = bootstrap_ci(s, y, Metric::roc_auc, 2000, 0.95, 1000 + t);
        if (ci.lo <= population_auc && population_auc <= ci.hi) ++covered;
    }
    const double coverage = static_cast<double>(covered) / trials;
    return {deterministic && coverage >= 0.9, std::string("deterministic ") + (deterministic ? "yes" : "no") +
                                                  ", coverage " + fmt(coverage, 3) + " of AUC " + fmt(population_auc)};
}

Outcome fdr() {
    const std::vector<double> example = {0.01, 0.02, 0.04, 0.5};
    const auto rej = bh_fdr(example, 0.05);
    const bool example_ok = rej == std::vector<bool>{true, true, false, false};

    std::mt19937_64 rng(107);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    int violations = 0;
    for (int k = 0; k < 100; ++k) {
        std::vector<double> p(1 + rng() % 30);
        for (auto& v : p) v = std::pow(u(rng), 3.0);
        double q1 = u(rng) * 0.3, q2 = u(rng) * 0.3;
        if (q1 > q2) std::swap(q1, q2);
        const auto r1 = bh_fdr(p, q1), r2 = bh_fdr(p, q2);
        if (r1 != oracle::bh(p, q1)) ++violations;
        for (std::size_t i = 0; i < p.size(); ++i)
            if (r1[i] && !r2[i]) ++violations;
    }
    return {example_ok && violations == 0,
            std::string("example ") + (example_ok ? "rejects exactly two" : "wrong") + ", " +
                std::to_string(violations) + " monotonicity violations"};
}

Outcome cvd() {
    std::mt19937_64 rng(108);
    int mismatches = 0;
    for (int k = 0; k < 12; ++k) {
        const Shape s{1 + static_cast<int>(rng() % 4), 1 + static_cast<int>(rng() % 9), 1 + static_cast<int>(rng() % 3)};
        auto ds = testing::random_dataset(rng(), s, 1 + rng() % 20, 1, 12, k % 3 != 0);
        if (k % 2 == 1) {
            ds.header.dtype_hidden = HiddenDtype::f16;
            for (auto& r : ds.records)
                for (auto& v : r.hidden) v = static_cast<float>(Eigen::half(v));
        }
        if (k % 4 == 2) ds.records[0].text = "Mount Everest is the highest mountain.";
        const auto path = testing::temp_path("accept_rt.cvd");
        write_dump(ds, path);
        if (!(read_dump(path) == ds)) ++mismatches;
    }

    const auto base = testing::random_dataset(109, Shape{2, 4, 2}, 5, 2, 6);
    const auto path = testing::temp_path("accept_base.cvd");
    write_dump(base, path);
    const auto bytes = slurp(path);
    const auto bad = testing::temp_path("accept_bad.cvd");
    std::string caught;

    // NaN: the last four bytes are the final attn_prev value
    auto b = bytes;
    const float nan = std::numeric_limits<float>::quiet_NaN();
    std::memcpy(b.data() + b.size() - 4, &nan, 4);
    spit(bad, b);
    const bool nan_ok = read_fails(bad) && !validate_dataset(read_dump(bad, false)).empty();
    caught += std::string("NaN ") + (nan_ok ? "caught" : "missed");

    // shape: header claims d = 5
    b = bytes;
    std::uint32_t len;
    std::memcpy(&len, b.data() + 4, 4);
    auto header = nlohmann::json::parse(std::string(b.data() + 8, len));
    header["d"] = 5;
    const auto text = header.dump();
    std::vector<char> reshaped(b.begin(), b.begin() + 4);
    const auto new_len = static_cast<std::uint32_t>(text.size());
    reshaped.insert(reshaped.end(), reinterpret_cast<const char*>(&new_len), reinterpret_cast<const char*>(&new_len) + 4);
    reshaped.insert(reshaped.end(), text.begin(), text.end());
    reshaped.insert(reshaped.end(), b.begin() + 8 + len, b.end());
    spit(bad, reshaped);
    const bool shape_ok = header.contains("d") && read_fails(bad);
    caught += std::string(", shape ") + (shape_ok ? "caught" : "missed");

    b = bytes;
    b[1] = 'X';
    spit(bad, b);
    const bool magic_ok = read_fails(bad);
    caught += std::string(", magic ") + (magic_ok ? "caught" : "missed");

    b = bytes;
    b.resize(b.size() - 7);
    spit(bad, b);
    const bool trunc_ok = read_fails(bad);
    caught += std::string(", truncation ") + (trunc_ok ? "caught" : "missed");

    return {mismatches == 0 && nan_ok && shape_ok && magic_ok && trunc_ok,
            std::to_string(mismatches) + " round-trip mismatches (f32 + f16); " + caught};
}

int cvt_run(const std::string& args, const std::string& log) {
    const std::string cmd = std::string(CVT_BINARY) + " " + args + " >>" + log + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Child processes do the work, so this criterion is budgeted on wall time.
Outcome cli_smoke(double& wall) {
    Timer t;
    const fs::path dir = fs::path(testing::temp_path("accept_cli"));
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string d = dir.string() + "/";
    const std::string log = d + "log.txt";

    auto step = [&](const std::string& args) {
        const int code = cvt_run(args, log);
        if (code != 0) throw std::runtime_error("`cvt " + args + "` exited " + std::to_string(code) + ", see " + log);
    };
    step("synth --n-claims 1500 --seed 11 --out " + d + "train.cvd --holdout 500 --holdout-out " + d + "test.cvd");
    step("validate " + d + "train.cvd");
    for (const char* m : {"intra", "sheeps", "saplma", "mm", "satrmd", "rauq", "ccs", "mind"})
        step(std::string("train --method ") + m + " --train " + d + "train.cvd --out " + d + m + ".json --seed 3");
    std::string scores;
    for (const auto& m : method_names()) {
        std::string args = "score --method " + m + " --data " + d + "test.cvd --out " + d + m + ".jsonl";
        if (!is_training_free(m)) args += " --model " + d + m + ".json";
        step(args);
        scores += " " + d + m + ".jsonl";
    }
    step("eval --scores" + scores +
         " --strata popularity_quintile,language,generation_length_group,position_bin --baseline sp --baseline ppl" +
         " --q 0.05 --out " + d + "report.json --csv " + d + "report.csv");

    const auto report = read_json_file(d + "report.json");
    std::size_t with_p = 0;
    for (const auto& row : report.at("rows"))
        if (!row.at("p_values").empty()) ++with_p;
    double intra_all = 0.0;
    for (const auto& row : report.at("rows"))
        if (row.at("method") == "intra" && row.at("stratum") == "all") intra_all = row.at("roc_auc").get<double>();
    wall = t.wall();
    const bool ok = report.at("rows").size() > 12 && with_p > 0 && wall < 300.0;
    return {ok, std::to_string(report.at("rows").size()) + " report rows, " + std::to_string(with_p) +
                    " with FDR-tested p-values, intra test AUC " + fmt(intra_all) + ", wall " + fmt(wall, 1) + " s"};
}

} // namespace

int main() {
    configure_threads_from_env();

    run("metric oracles", 10, metric_oracles);
    run("gradient correctness", 10, gradients);

    Timer prep;
    const auto data = default_synth();
    const double prep_cpu = prep.cpu();
    std::printf("      synthetic data (5000 claims, seed 7) generated in %.1f s CPU\n", prep_cpu);
    run("synthetic INTRA recovery", 120 - prep_cpu, [&] { return intra_recovery(data); });
    run("layer-range ablation trend", 180, [&] { return layer_ablation(data); });

    run("RAUQ degeneracy", 0, rauq_degeneracy);
    run("quantile normalizer", 0, quantile_normalizer);
    run("bootstrap", 120, bootstrap);
    run("BH-FDR", 0, fdr);
    run("CVD round trip and corruption", 0, cvd);

    {
        Timer t;
        double wall = 0.0;
        Outcome o;
        try {
            o = cli_smoke(wall);
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
            wall = t.wall();
        }
        report("end-to-end CLI smoke", o, wall);
    }

    std::printf("%s: %d criterion(s) failed\n", failures ? "FAILED" : "ALL PASSED", failures);
    return failures ? 1 : 0;
}
